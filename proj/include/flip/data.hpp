#pragma once

// Domain datasets, cross-domain protocol splits, balanced multi-domain
// batching, few-shot target injection and two-view sample construction.

#include "flip/image.hpp"
#include "flip/prompts.hpp"
#include "flip/random.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace flip {

enum class AttackType { None, Print, Replay, Other };

const char* to_string(AttackType a);
AttackType parse_attack_type(const std::string& s);

struct Sample {
  std::string id;
  std::string domain;  // registry name of the owning dataset
  std::filesystem::path path;
  Label label = Label::Real;
  AttackType attack = AttackType::None;

  /// Globally unique identifier ("domain/id").
  std::string key() const { return domain + "/" + id; }
};

struct DomainDataset {
  std::string code;  // short letter used in protocol names
  std::string name;  // registry name and manifest directory
  std::vector<Sample> samples;

  long count(Label l) const;
  /// Unique ids and label/attack consistency (real <=> none).
  void validate() const;
};

/// Manifest: CSV with header sample_id,relative_path,label,attack_type.
/// Paths are resolved against the manifest's directory; missing files are an
/// error when `check_paths` is set.
DomainDataset read_manifest(const std::filesystem::path& manifest, const std::string& code,
                            const std::string& name, bool check_paths = true);
void write_manifest(const std::filesystem::path& manifest, const DomainDataset& ds);

enum class ProtocolId { One, Two, Three, UnseenSpoof };

ProtocolId parse_protocol_id(const std::string& s);
std::string to_string(ProtocolId id);

struct DomainRef {
  std::string code;
  std::string name;
};

/// One train/test scenario, independent of any data on disk.
struct ProtocolSpec {
  ProtocolId id = ProtocolId::One;
  std::string label;  // e.g. "OCI -> M", "M -> C", "Replay"
  std::vector<DomainRef> sources;
  DomainRef target;  // for unseen-spoof: pseudo-domain holding the held-out attack
  AttackType unseen_attack = AttackType::None;
};

DomainRef lookup_domain(ProtocolId family, const std::string& code);
const DomainRef& supplementary_domain();

/// All scenarios of a protocol (4, 3, 12 and 2 respectively).
std::vector<ProtocolSpec> enumerate_protocols(ProtocolId id);
/// Finds a scenario by target code (protocols 1/2), "S->T" pair (protocol 3)
/// or attack name (unseen-spoof).
ProtocolSpec find_protocol(ProtocolId id, const std::string& target_or_pair);
/// Generic constructor; rejects a target listed among the sources and unknown codes.
ProtocolSpec make_protocol(ProtocolId id, const std::vector<std::string>& source_codes,
                           const std::string& target_code);

using DatasetLoader = std::function<DomainDataset(const DomainRef&)>;

/// Loads <root>/<name>/manifest.csv for each requested domain.
DatasetLoader manifest_loader(const std::filesystem::path& root, bool check_paths = true);

struct ProtocolSplit {
  ProtocolSpec spec;
  std::vector<DomainDataset> sources;
  std::optional<DomainDataset> supplementary;
  std::optional<DomainDataset> target_shots;  // few-shot samples moved into training
  DomainDataset target;                       // evaluation pool
  long shots = 0;
  std::uint64_t seed = 0;

  /// Domains contributing to training batches, in sampling order.
  std::vector<const DomainDataset*> training_domains() const;
  std::vector<Sample> train_pool() const;
  const std::vector<Sample>& test_pool() const { return target.samples; }
  /// Throws when a target domain leaks into training or pools overlap.
  void validate() const;
};

ProtocolSplit build_protocol(const ProtocolSpec& spec, const DatasetLoader& load, long shots,
                             std::uint64_t seed, bool with_supplementary = false);

/// Moves k stratified target samples into training: ceil(k/2) from the class
/// rarer in the target pool (ties broken at random), the rest from the other.
ProtocolSplit few_shot_inject(const ProtocolSplit& split, long k, Rng& rng);

struct SamplerState {
  long batches = 0;
  std::vector<long> draws;  // per (domain, class) pool
  nlohmann::json to_json() const;
  static SamplerState from_json(const nlohmann::json& j);
};

/// Infinite sampler: each batch holds exactly `per_domain` samples from every
/// training domain, split between the classes as evenly as parity allows.
/// Each (domain, class) pool is reshuffled on exhaustion; epoch e of a pool is
/// a pure function of (seed, domain, class, e), so the stream is reproducible
/// from the draw counters alone.
class BalancedSampler {
 public:
  BalancedSampler(const ProtocolSplit& split, long per_domain, std::uint64_t seed);

  std::vector<Sample> next();
  long batch_size() const { return per_domain_ * static_cast<long>(pools_.size() / 2); }
  long domain_count() const { return static_cast<long>(pools_.size() / 2); }
  SamplerState state() const;
  void restore(const SamplerState& s);

 private:
  Sample draw(std::size_t pool);

  long per_domain_;
  std::uint64_t seed_;
  std::vector<std::vector<Sample>> pools_;  // index = 2 * domain + class
  SamplerState state_;
  std::map<std::pair<std::size_t, long>, std::vector<long>> perm_cache_;
};

class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual RgbImage load(const Sample& s) const = 0;
};

/// Decodes from disk at a fixed square size; decoded images are cached.
class DiskImageSource : public ImageSource {
 public:
  explicit DiskImageSource(long size) : size_(size) {}
  RgbImage load(const Sample& s) const override;

 private:
  long size_;
  mutable std::mutex mu_;
  mutable std::map<std::string, RgbImage> cache_;
};

class MemoryImageSource : public ImageSource {
 public:
  void add(const Sample& s, RgbImage img) { images_[s.key()] = std::move(img); }
  RgbImage load(const Sample& s) const override;

 private:
  std::map<std::string, RgbImage> images_;
};

struct AugmentedPair {
  FaceImage view1;
  FaceImage view2;
  Label label = Label::Real;
  long prompt_index1 = 0;  // indices into the label's prompt list
  long prompt_index2 = 0;
  std::string prompt_view1;
  std::string prompt_view2;
};

AugmentedPair make_views(const RgbImage& img, Label label, const PromptSet& ps, const AugmentConfig& aug,
                         Rng& rng);

/// Procedurally textured stand-in data. Real samples carry smooth shading,
/// print attacks a fine stripe pattern, replay attacks a moire grid; each
/// domain applies its own tint and brightness.
struct SyntheticSpec {
  std::vector<std::string> domains{"A", "B"};
  long per_class = 24;
  long image_size = 32;
  std::uint64_t seed = 7;
};

struct SyntheticData {
  std::vector<DomainDataset> domains;
  MemoryImageSource images;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);
RgbImage synthetic_image(long size, Label label, AttackType attack, long domain_index, Rng& rng);
/// Writes <root>/<name>/manifest.csv plus PNG frames for every synthetic domain.
void write_synthetic(const std::filesystem::path& root, const SyntheticSpec& spec);

}  // namespace flip
