#pragma once

// The three finetuning strategies as step functions over a shared model,
// plus the iteration-driven training loop with checkpoint/resume.
//
//   V    image encoder + MLP head on the class token, cross-entropy
//   IT   image + text encoders, cross-entropy over prompt-similarity logits
//   MCL  IT plus a view-contrastive loss on projected image embeddings and a
//        cross-modal view-consistency loss

#include "flip/data.hpp"
#include "flip/encoders.hpp"
#include "flip/losses.hpp"
#include "flip/optim.hpp"
#include "flip/prompts.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flip {

inline constexpr const char* kCodeVersion = "0.1.0";

enum class Strategy { V, IT, MCL };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

nlohmann::json augment_to_json(const AugmentConfig& a);

struct TrainPlan {
  Strategy strategy = Strategy::MCL;
  long iterations = 4000;
  double lr = 1e-6;
  double weight_decay = 1e-6;
  bool decoupled_weight_decay = true;
  double grad_clip = 0.0;  // 0 disables
  long per_domain_batch = 3;
  LossWeights weights;
  long shots = 0;
  std::uint64_t seed = 0;
  bool freeze_text = false;  // text encoder, IT/MCL only
  bool freeze_logit_scale = false;
  bool freeze_positional = false;  // both towers' positional embeddings
  double simclr_temperature = 0.5;
  long checkpoint_every = 500;  // 0 writes only the final checkpoint
  AugmentConfig augment;

  /// Defaults with the per-domain batch size of the given protocol.
  static TrainPlan for_protocol(ProtocolId id);

  void validate() const;
  /// Appends one "train.<field>: ..." message per violated range.
  void collect_errors(std::vector<std::string>& e) const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys and ill-typed values are collected into `errors`
  /// under `path`. Absent keys keep their defaults.
  static TrainPlan from_json(const nlohmann::json& j, std::vector<std::string>& errors,
                             const std::string& path = "train");
  static TrainPlan from_json(const nlohmann::json& j);
};

struct StepLosses {
  double l_ce = 0.0;
  double l_simclr = 0.0;
  double l_mse = 0.0;
  double l_total = 0.0;
};

/// Loss graphs of one batch; l_simclr and l_mse are zero outside MCL.
struct Objective {
  ag::Var l_ce;
  ag::Var l_simclr;
  ag::Var l_mse;
  ag::Var total;
};

Objective v_objective(FlipModel& model, const std::vector<FaceImage>& batch, std::span<const int> labels);
Objective it_objective(FlipModel& model, const PromptSet& prompts, const std::vector<FaceImage>& batch,
                       std::span<const int> labels);
/// Cross-entropy on view 1, contrast between projected views, consistency
/// between each view and its sampled prompt. Needs at least 2 pairs.
Objective mcl_objective(FlipModel& model, const PromptSet& prompts, const std::vector<AugmentedPair>& pairs,
                        const LossWeights& weights, double simclr_temperature);

/// Owns the optimizer and the trainable parameter set of one strategy.
/// Construction marks every parameter the strategy must not update as
/// non-trainable on the model, so no gradient is ever formed for it.
class Trainer {
 public:
  Trainer(FlipModel& model, TrainPlan plan, PromptSet prompts);

  /// lr(iteration); constant by default.
  std::function<double(long)> schedule;

  StepLosses step_v(const std::vector<FaceImage>& batch, std::span<const int> labels, long iteration = 0);
  StepLosses step_it(const std::vector<FaceImage>& batch, std::span<const int> labels, long iteration = 0);
  StepLosses step_mcl(const std::vector<AugmentedPair>& pairs, long iteration = 0);

  /// Loads, preprocesses and dispatches one sampled batch. All randomness is
  /// drawn from a stream keyed by (seed, iteration).
  StepLosses step(const std::vector<Sample>& batch, const ImageSource& images, long iteration);

  const std::vector<Parameter*>& trainable() const { return params_; }
  Adam& optimizer() { return adam_; }
  const TrainPlan& plan() const { return plan_; }
  FlipModel& model() { return model_; }

 private:
  StepLosses finish(const ag::Var& total, StepLosses losses, long iteration, const std::string& context);

  FlipModel& model_;
  TrainPlan plan_;
  PromptSet prompts_;
  Adam adam_;
  std::vector<Parameter*> params_;
};

/// Everything needed to continue or evaluate a run.
struct Checkpoint {
  TensorArchive model_state;
  TensorArchive optimizer_state;
  ModelConfig model_config;
  TrainPlan plan;
  SamplerState sampler;
  long iteration = 0;
  std::string config_hash;
  std::string code_version = kCodeVersion;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  /// A model carrying the checkpoint's weights.
  FlipModel restore_model(BpeTokenizer tokenizer = BpeTokenizer()) const;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::string config_hash;
  std::optional<std::filesystem::path> resume_from;
  /// Called after every step with (iteration, losses).
  std::function<void(long, const StepLosses&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepLosses> losses;  // steps run in this invocation
};

/// Runs plan.iterations steps (continuing from `resume_from` when given),
/// writing checkpoint_<iter>.safetensors every plan.checkpoint_every steps,
/// checkpoint_final.safetensors at the end and an append-only train_log.csv.
TrainResult run_training(FlipModel& model, const TrainPlan& plan, const ProtocolSplit& split,
                         const ImageSource& images, const PromptSet& prompts, const RunOptions& options = {});

}  // namespace flip
