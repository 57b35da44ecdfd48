#include "flip/data.hpp"

#include "flip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace flip {

const char* to_string(AttackType a) {
  switch (a) {
    case AttackType::None:
      return "none";
    case AttackType::Print:
      return "print";
    case AttackType::Replay:
      return "replay";
    case AttackType::Other:
      return "other";
  }
  return "other";
}

AttackType parse_attack_type(const std::string& s) {
  if (s == "none") return AttackType::None;
  if (s == "print") return AttackType::Print;
  if (s == "replay") return AttackType::Replay;
  if (s == "other") return AttackType::Other;
  throw ConfigError("unknown attack type '" + s + "'");
}

long DomainDataset::count(Label l) const {
  return std::count_if(samples.begin(), samples.end(), [l](const Sample& s) { return s.label == l; });
}

void DomainDataset::validate() const {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.id).second) throw ConfigError("dataset " + name + ": duplicate sample id '" + s.id + "'");
    if ((s.label == Label::Real) != (s.attack == AttackType::None)) {
      throw ConfigError("dataset " + name + ": sample '" + s.id + "' label and attack type disagree");
    }
  }
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

DomainDataset read_manifest(const std::filesystem::path& manifest, const std::string& code,
                            const std::string& name, bool check_paths) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  DomainDataset ds{code, name, {}};
  const auto dir = manifest.parent_path();
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (lineno == 1) {
      if (cells != std::vector<std::string>{"sample_id", "relative_path", "label", "attack_type"}) {
        throw ConfigError(manifest.string() + ": header must be sample_id,relative_path,label,attack_type");
      }
      continue;
    }
    if (cells.size() != 4) {
      throw ConfigError(manifest.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    }
    Sample s;
    s.id = cells[0];
    s.domain = name;
    s.path = dir / cells[1];
    s.label = parse_label(cells[2]);
    s.attack = parse_attack_type(cells[3]);
    if (check_paths && !std::filesystem::exists(s.path)) {
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": missing image " + s.path.string());
    }
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

void write_manifest(const std::filesystem::path& manifest, const DomainDataset& ds) {
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write manifest " + manifest.string());
  out << "sample_id,relative_path,label,attack_type\n";
  const auto dir = manifest.parent_path();
  for (const auto& s : ds.samples) {
    out << s.id << "," << std::filesystem::relative(s.path, dir).generic_string() << "," << to_string(s.label)
        << "," << to_string(s.attack) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Protocol registry

ProtocolId parse_protocol_id(const std::string& s) {
  if (s == "1") return ProtocolId::One;
  if (s == "2") return ProtocolId::Two;
  if (s == "3") return ProtocolId::Three;
  if (s == "unseen-spoof" || s == "unseen") return ProtocolId::UnseenSpoof;
  throw ConfigError("unknown protocol id '" + s + "' (expected 1, 2, 3 or unseen-spoof)");
}

std::string to_string(ProtocolId id) {
  switch (id) {
    case ProtocolId::One:
      return "1";
    case ProtocolId::Two:
      return "2";
    case ProtocolId::Three:
      return "3";
    case ProtocolId::UnseenSpoof:
      return "unseen-spoof";
  }
  return "?";
}

namespace {

const std::vector<DomainRef>& family(ProtocolId id) {
  static const std::vector<DomainRef> mcio{
      {"M", "msu_mfsd"}, {"C", "casia_mfsd"}, {"I", "replay_attack"}, {"O", "oulu_npu"}};
  static const std::vector<DomainRef> wcs{{"W", "wmca"}, {"C", "casia_cefa"}, {"S", "casia_surf"}};
  return id == ProtocolId::Two ? wcs : mcio;
}

constexpr const char* kArrow = " → ";

std::string codes_of(const std::vector<std::string>& codes) {
  std::string s;
  for (const auto& c : codes) s += c;
  return s;
}

}  // namespace

DomainRef lookup_domain(ProtocolId fam, const std::string& code) {
  for (const auto& d : family(fam)) {
    if (d.code == code) return d;
  }
  throw ConfigError("unknown domain '" + code + "' for protocol " + to_string(fam));
}

const DomainRef& supplementary_domain() {
  static const DomainRef celeba{"CelebA-Spoof", "celeba_spoof"};
  return celeba;
}

ProtocolSpec make_protocol(ProtocolId id, const std::vector<std::string>& source_codes,
                           const std::string& target_code) {
  if (id == ProtocolId::UnseenSpoof) throw ConfigError("make_protocol: use find_protocol for unseen-spoof");
  if (source_codes.empty()) throw ConfigError("protocol needs at least one source domain");
  ProtocolSpec spec;
  spec.id = id;
  spec.target = lookup_domain(id, target_code);
  std::set<std::string> seen;
  for (const auto& c : source_codes) {
    if (c == target_code) throw ConfigError("target domain '" + c + "' is listed among the sources");
    if (!seen.insert(c).second) throw ConfigError("source domain '" + c + "' listed twice");
    spec.sources.push_back(lookup_domain(id, c));
  }
  spec.label = codes_of(source_codes) + kArrow + target_code;
  return spec;
}

std::vector<ProtocolSpec> enumerate_protocols(ProtocolId id) {
  std::vector<ProtocolSpec> out;
  switch (id) {
    case ProtocolId::One:
      out.push_back(make_protocol(id, {"O", "C", "I"}, "M"));
      out.push_back(make_protocol(id, {"O", "M", "I"}, "C"));
      out.push_back(make_protocol(id, {"O", "C", "M"}, "I"));
      out.push_back(make_protocol(id, {"I", "C", "M"}, "O"));
      break;
    case ProtocolId::Two:
      out.push_back(make_protocol(id, {"C", "S"}, "W"));
      out.push_back(make_protocol(id, {"S", "W"}, "C"));
      out.push_back(make_protocol(id, {"C", "W"}, "S"));
      break;
    case ProtocolId::Three: {
      std::vector<std::string> codes;
      for (const auto& d : family(id)) codes.push_back(d.code);
      std::sort(codes.begin(), codes.end());
      for (const auto& s : codes) {
        for (const auto& t : codes) {
          if (s != t) out.push_back(make_protocol(id, {s}, t));
        }
      }
      break;
    }
    case ProtocolId::UnseenSpoof:
      for (auto [name, attack] : {std::pair{"Replay", AttackType::Replay}, std::pair{"Print", AttackType::Print}}) {
        ProtocolSpec spec;
        spec.id = id;
        spec.label = name;
        spec.sources = family(ProtocolId::One);
        spec.target = {name, std::string("unseen_") + to_string(attack)};
        spec.unseen_attack = attack;
        out.push_back(spec);
      }
      break;
  }
  return out;
}

ProtocolSpec find_protocol(ProtocolId id, const std::string& key) {
  std::string k;
  for (char ch : key) {
    if (!std::isspace(static_cast<unsigned char>(ch))) k.push_back(ch);
  }
  for (const auto& spec : enumerate_protocols(id)) {
    std::string compact;
    for (const auto& s : spec.sources) compact += s.code;
    const std::string pair = compact + "->" + spec.target.code;
    std::string lower_label = spec.label;
    std::transform(lower_label.begin(), lower_label.end(), lower_label.begin(), ::tolower);
    std::string lower_key = k;
    std::transform(lower_key.begin(), lower_key.end(), lower_key.begin(), ::tolower);
    if (id == ProtocolId::UnseenSpoof ? lower_key == lower_label : (k == pair || (k == spec.target.code && id != ProtocolId::Three))) {
      return spec;
    }
  }
  throw ConfigError("protocol " + to_string(id) + " has no scenario '" + key + "'");
}

DatasetLoader manifest_loader(const std::filesystem::path& root, bool check_paths) {
  return [root, check_paths](const DomainRef& d) {
    return read_manifest(root / d.name / "manifest.csv", d.code, d.name, check_paths);
  };
}

// ---------------------------------------------------------------------------
// Splits

std::vector<const DomainDataset*> ProtocolSplit::training_domains() const {
  std::vector<const DomainDataset*> out;
  for (const auto& s : sources) out.push_back(&s);
  if (supplementary) out.push_back(&*supplementary);
  if (target_shots && !target_shots->samples.empty()) out.push_back(&*target_shots);
  return out;
}

std::vector<Sample> ProtocolSplit::train_pool() const {
  std::vector<Sample> out;
  for (const auto* d : training_domains()) out.insert(out.end(), d->samples.begin(), d->samples.end());
  return out;
}

void ProtocolSplit::validate() const {
  for (const auto& s : sources) {
    if (s.name == target.name) throw ConfigError("target domain " + target.name + " appears among the sources");
  }
  std::set<std::string> train;
  for (const auto& s : train_pool()) train.insert(s.key());
  for (const auto& s : test_pool()) {
    if (train.count(s.key())) throw ConfigError("sample " + s.key() + " is in both train and test pools");
  }
}

namespace {

ProtocolSplit build_unseen_spoof(const ProtocolSpec& spec, const DatasetLoader& load, std::uint64_t seed) {
  std::vector<DomainDataset> domains;
  for (const auto& ref : spec.sources) domains.push_back(load(ref));

  // Groups: real, print, replay aggregated over all domains, each split 80/20.
  // Training keeps the 80% parts except the unseen attack; testing keeps the
  // 20% parts of real and the unseen attack. The seen attack's 20% is unused.
  const AttackType groups[] = {AttackType::None, AttackType::Print, AttackType::Replay};
  std::set<std::string> train_keys;
  std::vector<Sample> test;
  for (std::uint64_t g = 0; g < 3; ++g) {
    std::vector<Sample> members;
    for (const auto& d : domains) {
      for (const auto& s : d.samples) {
        if (s.attack == groups[g]) members.push_back(s);
      }
    }
    Rng rng = derive_rng(seed, {0x5350u, g});
    shuffle_in_place(members, rng);
    const std::size_t n_train = members.size() * 4 / 5;
    for (std::size_t i = 0; i < members.size(); ++i) {
      const bool unseen = groups[g] == spec.unseen_attack;
      if (i < n_train) {
        if (!unseen) train_keys.insert(members[i].key());
      } else if (unseen || groups[g] == AttackType::None) {
        test.push_back(members[i]);
      }
    }
  }

  ProtocolSplit split;
  split.spec = spec;
  split.seed = seed;
  for (auto& d : domains) {
    DomainDataset kept{d.code, d.name, {}};
    for (const auto& s : d.samples) {
      if (train_keys.count(s.key())) kept.samples.push_back(s);
    }
    split.sources.push_back(std::move(kept));
  }
  std::sort(test.begin(), test.end(), [](const Sample& a, const Sample& b) { return a.key() < b.key(); });
  split.target = DomainDataset{spec.target.code, spec.target.name, std::move(test)};
  return split;
}

}  // namespace

ProtocolSplit build_protocol(const ProtocolSpec& spec, const DatasetLoader& load, long shots,
                             std::uint64_t seed, bool with_supplementary) {
  if (shots < 0) throw ConfigError("shots must be nonnegative");
  ProtocolSplit split;
  if (spec.id == ProtocolId::UnseenSpoof) {
    split = build_unseen_spoof(spec, load, seed);
  } else {
    for (const auto& s : spec.sources) {
      if (s.name == spec.target.name) throw ConfigError("target domain " + s.code + " is listed among the sources");
    }
    split.spec = spec;
    split.seed = seed;
    for (const auto& ref : spec.sources) split.sources.push_back(load(ref));
    split.target = load(spec.target);
  }
  if (with_supplementary) split.supplementary = load(supplementary_domain());
  split.validate();
  if (shots > 0) {
    Rng rng = derive_rng(seed, {0x5348u});
    split = few_shot_inject(split, shots, rng);
  }
  return split;
}

ProtocolSplit few_shot_inject(const ProtocolSplit& split, long k, Rng& rng) {
  if (k < 0) throw ConfigError("few-shot count must be nonnegative");
  if (k == 0) return split;
  const auto& pool = split.target.samples;
  if (k > static_cast<long>(pool.size())) {
    throw ConfigError("few-shot count " + std::to_string(k) + " exceeds target pool size " +
                      std::to_string(pool.size()));
  }
  const long n_real = split.target.count(Label::Real);
  const long n_spoof = static_cast<long>(pool.size()) - n_real;
  if (n_real == 0 || n_spoof == 0) throw DomainError("few-shot injection needs both classes in the target pool");

  Label rarer = n_real < n_spoof ? Label::Real : Label::Spoof;
  if (n_real == n_spoof) rarer = uniform_index(rng, 2) == 0 ? Label::Real : Label::Spoof;
  const long want_rarer = (k + 1) / 2;
  const long want_other = k - want_rarer;
  const Label other = rarer == Label::Real ? Label::Spoof : Label::Real;
  if (split.target.count(rarer) < want_rarer || split.target.count(other) < want_other) {
    throw DomainError("target pool cannot supply a stratified few-shot draw of " + std::to_string(k));
  }

  std::set<std::size_t> chosen;
  for (auto [label, want] : {std::pair{rarer, want_rarer}, std::pair{other, want_other}}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool[i].label == label) idx.push_back(i);
    }
    shuffle_in_place(idx, rng);
    chosen.insert(idx.begin(), idx.begin() + want);
  }

  ProtocolSplit out = split;
  out.shots = k;
  DomainDataset shots{split.target.code, split.target.name + "_shots", {}};
  out.target.samples.clear();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    (chosen.count(i) ? shots.samples : out.target.samples).push_back(pool[i]);
  }
  if (out.target_shots) {
    out.target_shots->samples.insert(out.target_shots->samples.end(), shots.samples.begin(), shots.samples.end());
  } else {
    out.target_shots = std::move(shots);
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Balanced sampler

nlohmann::json SamplerState::to_json() const { return {{"batches", batches}, {"draws", draws}}; }

SamplerState SamplerState::from_json(const nlohmann::json& j) {
  return SamplerState{j.at("batches").get<long>(), j.at("draws").get<std::vector<long>>()};
}

BalancedSampler::BalancedSampler(const ProtocolSplit& split, long per_domain, std::uint64_t seed)
    : per_domain_(per_domain), seed_(seed) {
  if (per_domain < 1) throw ConfigError("per-domain batch size must be at least 1");
  const auto domains = split.training_domains();
  if (domains.empty()) throw ConfigError("no training domains");
  for (const auto* d : domains) {
    if (d->samples.empty()) throw ConfigError("training domain " + d->name + " has no samples");
    for (Label l : {Label::Real, Label::Spoof}) {
      std::vector<Sample> pool;
      for (const auto& s : d->samples) {
        if (s.label == l) pool.push_back(s);
      }
      pools_.push_back(std::move(pool));
    }
  }
  state_.draws.assign(pools_.size(), 0);
}

Sample BalancedSampler::draw(std::size_t pool) {
  const auto& items = pools_[pool];
  const long n = static_cast<long>(items.size());
  const long k = state_.draws[pool]++;
  const long epoch = k / n;
  auto& perm = perm_cache_[{pool, epoch}];
  if (perm.empty()) {
    perm.resize(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    Rng rng = derive_rng(seed_, {0x42u, pool, static_cast<std::uint64_t>(epoch)});
    shuffle_in_place(perm, rng);
    // Older epochs are never revisited.
    std::erase_if(perm_cache_, [&](const auto& kv) { return kv.first.first == pool && kv.first.second < epoch; });
  }
  return items[static_cast<std::size_t>(perm_cache_[{pool, epoch}][static_cast<std::size_t>(k % n)])];
}

std::vector<Sample> BalancedSampler::next() {
  std::vector<Sample> batch;
  batch.reserve(static_cast<std::size_t>(batch_size()));
  const long t = state_.batches++;
  for (std::size_t d = 0; d < pools_.size() / 2; ++d) {
    const std::size_t real = 2 * d;
    const std::size_t spoof = 2 * d + 1;
    long n_real = per_domain_ / 2;
    if (per_domain_ % 2 == 1 && (t + static_cast<long>(d)) % 2 == 0) ++n_real;
    long n_spoof = per_domain_ - n_real;
    if (pools_[real].empty()) {
      n_spoof += n_real;
      n_real = 0;
    } else if (pools_[spoof].empty()) {
      n_real += n_spoof;
      n_spoof = 0;
    }
    for (long i = 0; i < n_real; ++i) batch.push_back(draw(real));
    for (long i = 0; i < n_spoof; ++i) batch.push_back(draw(spoof));
  }
  return batch;
}

SamplerState BalancedSampler::state() const { return state_; }

void BalancedSampler::restore(const SamplerState& s) {
  if (s.draws.size() != pools_.size()) throw ConfigError("sampler state does not match the split's domains");
  state_ = s;
  perm_cache_.clear();
}

// ---------------------------------------------------------------------------
// Image sources and views

RgbImage DiskImageSource::load(const Sample& s) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(s.key()); it != cache_.end()) return it->second;
  }
  RgbImage img = load_image(s.path, size_);
  std::lock_guard lock(mu_);
  cache_.emplace(s.key(), img);
  return img;
}

RgbImage MemoryImageSource::load(const Sample& s) const {
  const auto it = images_.find(s.key());
  if (it == images_.end()) throw IoError("no image for sample " + s.key());
  return it->second;
}

AugmentedPair make_views(const RgbImage& img, Label label, const PromptSet& ps, const AugmentConfig& aug,
                         Rng& rng) {
  AugmentedPair pair;
  pair.label = label;
  std::tie(pair.prompt_index1, pair.prompt_index2) = sample_prompt_view_indices(ps, label, rng);
  const auto& list = ps.of(label);
  pair.prompt_view1 = list[static_cast<std::size_t>(pair.prompt_index1)];
  pair.prompt_view2 = list[static_cast<std::size_t>(pair.prompt_index2)];
  pair.view1 = normalize(augment(img, aug, rng));
  pair.view2 = normalize(augment(img, aug, rng));
  return pair;
}

// ---------------------------------------------------------------------------
// Synthetic data

RgbImage synthetic_image(long size, Label label, AttackType attack, long domain_index, Rng& rng) {
  using std::numbers::pi;
  const double s = static_cast<double>(size);
  RgbImage img(size, size);
  const double cx = s * uniform(rng, 0.4, 0.6);
  const double cy = s * uniform(rng, 0.4, 0.6);
  const double sx = s * uniform(rng, 0.18, 0.26);
  const double sy = s * uniform(rng, 0.24, 0.32);
  const std::array<double, 3> skin{0.80, 0.62, 0.52};
  const double phase1 = uniform(rng, 0, 2 * pi);
  const double phase2 = uniform(rng, 0, 2 * pi);
  const double theta = uniform(rng, 0, pi);
  const double stripe_period = uniform(rng, 2.0, 3.0);
  const double grid_p1 = uniform(rng, 3.0, 4.0);
  const double grid_p2 = uniform(rng, 3.0, 4.0);
  std::normal_distribution<double> noise(0.0, 0.02);

  const double d = static_cast<double>(domain_index);
  std::array<double, 3> gain;
  for (int c = 0; c < 3; ++c) gain[c] = 1.0 + 0.12 * std::sin(1.7 * d + 2.1 * c);
  const double offset = 0.05 * std::cos(2.3 * d);

  for (long y = 0; y < size; ++y) {
    for (long x = 0; x < size; ++x) {
      const double dx = (x - cx) / sx;
      const double dy = (y - cy) / sy;
      const double face = 0.35 + 0.55 * std::exp(-0.5 * (dx * dx + dy * dy));
      const double shade = 0.04 * std::sin(2 * pi * x / s + phase1) + 0.04 * std::cos(2 * pi * y / s + phase2);
      double pattern = 0.0;
      double contrast = 1.0;
      if (label == Label::Spoof) {
        if (attack == AttackType::Replay) {
          pattern = 0.12 * std::sin(2 * pi * x / grid_p1) * std::sin(2 * pi * y / grid_p2);
          contrast = 0.8;
        } else {
          pattern = 0.12 * std::sin(2 * pi * (x * std::cos(theta) + y * std::sin(theta)) / stripe_period);
          contrast = 0.7;
        }
      }
      for (int c = 0; c < 3; ++c) {
        double v = skin[c] * face * contrast + (1 - contrast) * 0.5 + shade + pattern;
        if (label == Label::Spoof && attack == AttackType::Replay && c == 2) v += 0.05;
        v = v * gain[c] + offset + noise(rng);
        img.channel[c](y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

namespace {

DomainRef synthetic_ref(const std::string& name) {
  for (ProtocolId fam : {ProtocolId::One, ProtocolId::Two}) {
    for (const auto& d : family(fam)) {
      if (d.name == name) return d;
    }
  }
  if (name == supplementary_domain().name) return supplementary_domain();
  return {name, name};
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  SyntheticData out;
  for (std::size_t di = 0; di < spec.domains.size(); ++di) {
    const DomainRef ref = synthetic_ref(spec.domains[di]);
    DomainDataset ds{ref.code, ref.name, {}};
    Rng rng = derive_rng(spec.seed, {0x5359u, di});
    for (long i = 0; i < 2 * spec.per_class; ++i) {
      Sample s;
      s.domain = ref.name;
      s.label = i % 2 == 0 ? Label::Real : Label::Spoof;
      s.attack = s.label == Label::Real ? AttackType::None : ((i / 2) % 2 == 0 ? AttackType::Print : AttackType::Replay);
      char id[32];
      std::snprintf(id, sizeof(id), "%s_%04ld", to_string(s.label), i);
      s.id = id;
      s.path = std::filesystem::path(ref.name) / "frames" / (s.id + ".png");
      out.images.add(s, synthetic_image(spec.image_size, s.label, s.attack, static_cast<long>(di), rng));
      ds.samples.push_back(std::move(s));
    }
    out.domains.push_back(std::move(ds));
  }
  return out;
}

void write_synthetic(const std::filesystem::path& root, const SyntheticSpec& spec) {
  SyntheticData data = make_synthetic(spec);
  for (auto& ds : data.domains) {
    const auto dir = root / ds.name;
    std::filesystem::create_directories(dir / "frames");
    for (auto& s : ds.samples) {
      const RgbImage img = data.images.load(s);
      s.path = dir / "frames" / (s.id + ".png");
      save_image(s.path, img);
    }
    write_manifest(dir / "manifest.csv", ds);
  }
}

}  // namespace flip
