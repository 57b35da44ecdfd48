#pragma once

// Run configuration: one JSON file per experiment. Parsing is strict (unknown
// keys and ill-typed values are errors reported with their field path) and
// the canonical form is hashed so every artifact can name its config.

#include "flip/data.hpp"
#include "flip/encoders.hpp"
#include "flip/evaluation.hpp"
#include "flip/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace flip {

struct RunConfig {
  struct Protocol {
    ProtocolId id = ProtocolId::One;
    std::string scenario = "M";  // target code, "S->T" pair or attack name
    bool supplementary = false;  // attach CelebA-Spoof as an extra training domain
  } protocol;

  struct Model {
    std::string preset = "toy";  // "toy" or "vit_b16"
    std::optional<std::filesystem::path> pretrained;  // safetensors, encoder weights
    std::optional<std::filesystem::path> merges;      // BPE merges (plain or .gz)
  } model;

  struct Eval {
    std::string threshold = "fixed";  // "fixed" or "eer"
    double fixed_threshold = 0.5;
    double fpr_target = 0.01;
    long batch_size = 32;
    std::optional<std::filesystem::path> baseline_dir;
  } eval;

  std::optional<std::filesystem::path> prompts;  // catalog JSON; built-in set when absent
  TrainPlan train;
  std::filesystem::path output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{0};

  nlohmann::json to_json() const;
  /// FNV-1a of the canonical JSON form.
  std::string hash() const;

  ProtocolSpec protocol_spec() const;
  ModelConfig model_config() const;
  BpeTokenizer tokenizer() const;
  PromptSet prompt_set() const;
  ThresholdPolicy threshold_policy() const;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
};

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise. Returns a log line.
std::string apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace flip
