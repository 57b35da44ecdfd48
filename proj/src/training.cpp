#include "flip/training.hpp"

#include "flip/errors.hpp"
#include "flip/json_util.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace flip {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::V:
      return "V";
    case Strategy::IT:
      return "IT";
    case Strategy::MCL:
      return "MCL";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "V" || s == "v") return Strategy::V;
  if (s == "IT" || s == "it") return Strategy::IT;
  if (s == "MCL" || s == "mcl") return Strategy::MCL;
  throw ConfigError("unknown strategy '" + s + "' (expected V, IT or MCL)");
}

// ---------------------------------------------------------------------------
// Plan

TrainPlan TrainPlan::for_protocol(ProtocolId id) {
  TrainPlan p;
  p.per_domain_batch = id == ProtocolId::Two ? 8 : 3;
  return p;
}

void TrainPlan::validate() const {
  std::vector<std::string> e;
  collect_errors(e);
  throw_if_errors(e, "training plan");
}

void TrainPlan::collect_errors(std::vector<std::string>& e) const {
  if (iterations < 0) e.push_back("train.iterations: must be nonnegative");
  if (!(lr >= 0) || !std::isfinite(lr)) e.push_back("train.lr: must be a finite nonnegative number");
  if (!(weight_decay >= 0)) e.push_back("train.weight_decay: must be nonnegative");
  if (!(grad_clip >= 0)) e.push_back("train.grad_clip: must be nonnegative");
  if (per_domain_batch < 1) e.push_back("train.per_domain_batch: must be at least 1");
  if (shots < 0) e.push_back("train.shots: must be nonnegative");
  if (!(simclr_temperature > 0)) e.push_back("train.simclr_temperature: must be positive");
  if (checkpoint_every < 0) e.push_back("train.checkpoint_every: must be nonnegative");
  if (augment.crop_scale_min <= 0 || augment.crop_scale_min > augment.crop_scale_max || augment.crop_scale_max > 1) {
    e.push_back("train.augment: crop scales must satisfy 0 < min <= max <= 1");
  }
  for (double p : {augment.flip_p, augment.jitter_p, augment.grayscale_p}) {
    if (p < 0 || p > 1) e.push_back("train.augment: probabilities must lie in [0, 1]");
  }
  try {
    weights.validate();
  } catch (const ConfigError& err) {
    e.push_back(std::string("train.weights: ") + err.what());
  }
}

nlohmann::json augment_to_json(const AugmentConfig& a) {
  return {{"enabled", a.enabled},         {"crop_scale_min", a.crop_scale_min},
          {"crop_scale_max", a.crop_scale_max}, {"flip_p", a.flip_p},
          {"jitter_p", a.jitter_p},       {"jitter_strength", a.jitter_strength},
          {"grayscale_p", a.grayscale_p}};
}

nlohmann::json TrainPlan::to_json() const {
  return {{"strategy", to_string(strategy)},
          {"iterations", iterations},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"decoupled_weight_decay", decoupled_weight_decay},
          {"grad_clip", grad_clip},
          {"per_domain_batch", per_domain_batch},
          {"weights", {{"alpha", weights.alpha}, {"beta", weights.beta}, {"gamma", weights.gamma}}},
          {"shots", shots},
          {"seed", seed},
          {"freeze_text", freeze_text},
          {"freeze_logit_scale", freeze_logit_scale},
          {"freeze_positional", freeze_positional},
          {"simclr_temperature", simclr_temperature},
          {"checkpoint_every", checkpoint_every},
          {"augment", augment_to_json(augment)}};
}

TrainPlan TrainPlan::from_json(const nlohmann::json& j, std::vector<std::string>& errors, const std::string& path) {
  TrainPlan p;
  JsonReader r(j, path, errors);
  std::string strategy = to_string(p.strategy);
  r.optional("strategy", strategy);
  try {
    p.strategy = parse_strategy(strategy);
  } catch (const ConfigError& e) {
    r.error("strategy", e.what());
  }
  r.optional("iterations", p.iterations);
  r.optional("lr", p.lr);
  r.optional("weight_decay", p.weight_decay);
  r.optional("decoupled_weight_decay", p.decoupled_weight_decay);
  r.optional("grad_clip", p.grad_clip);
  r.optional("per_domain_batch", p.per_domain_batch);
  {
    JsonReader w = r.child("weights");
    w.optional("alpha", p.weights.alpha);
    w.optional("beta", p.weights.beta);
    w.optional("gamma", p.weights.gamma);
    w.finish();
  }
  r.optional("shots", p.shots);
  r.optional("seed", p.seed);
  r.optional("freeze_text", p.freeze_text);
  r.optional("freeze_logit_scale", p.freeze_logit_scale);
  r.optional("freeze_positional", p.freeze_positional);
  r.optional("simclr_temperature", p.simclr_temperature);
  r.optional("checkpoint_every", p.checkpoint_every);
  {
    JsonReader a = r.child("augment");
    a.optional("enabled", p.augment.enabled);
    a.optional("crop_scale_min", p.augment.crop_scale_min);
    a.optional("crop_scale_max", p.augment.crop_scale_max);
    a.optional("flip_p", p.augment.flip_p);
    a.optional("jitter_p", p.augment.jitter_p);
    a.optional("jitter_strength", p.augment.jitter_strength);
    a.optional("grayscale_p", p.augment.grayscale_p);
    a.finish();
  }
  r.finish();
  return p;
}

TrainPlan TrainPlan::from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  TrainPlan p = from_json(j, errors);
  throw_if_errors(errors, "training plan");
  return p;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

bool is_buffer(const Parameter& p) { return p.name.find("running_") != std::string::npos; }

std::vector<ParamGroup> groups_of(Strategy s) {
  switch (s) {
    case Strategy::V:
      return {ParamGroup::Image, ParamGroup::Head};
    case Strategy::IT:
      return {ParamGroup::Image, ParamGroup::Text};
    case Strategy::MCL:
      return {ParamGroup::Image, ParamGroup::Text, ParamGroup::Projector};
  }
  return {};
}

std::vector<int> labels_of(const std::vector<Sample>& batch) {
  std::vector<int> out;
  for (const auto& s : batch) out.push_back(static_cast<int>(s.label));
  return out;
}

}  // namespace

Trainer::Trainer(FlipModel& model, TrainPlan plan, PromptSet prompts)
    : schedule([lr = plan.lr](long) { return lr; }),
      model_(model),
      plan_(std::move(plan)),
      prompts_(std::move(prompts)),
      adam_(AdamConfig{0.9, 0.999, 1e-8, plan_.weight_decay, plan_.decoupled_weight_decay, plan_.grad_clip}) {
  plan_.validate();
  prompts_.validate();
  for (Parameter* p : model_.all_parameters()) p->trainable = false;
  std::set<const Parameter*> frozen;
  if (plan_.freeze_text) {
    for (Parameter* p : model_.group(ParamGroup::Text)) {
      if (p != &model_.logit_scale) frozen.insert(p);
    }
  }
  if (plan_.freeze_logit_scale) frozen.insert(&model_.logit_scale);
  if (plan_.freeze_positional) {
    frozen.insert(&model_.image.positional_embedding());
    frozen.insert(&model_.text.positional_embedding());
  }
  for (ParamGroup g : groups_of(plan_.strategy)) {
    for (Parameter* p : model_.group(g)) {
      if (is_buffer(*p) || frozen.count(p)) continue;
      p->trainable = true;
      params_.push_back(p);
    }
  }
}

StepLosses Trainer::finish(const ag::Var& total, StepLosses losses, long iteration, const std::string& context) {
  losses.l_total = total.scalar();
  auto dump = [&](const std::string& what) {
    std::ostringstream msg;
    msg << std::setprecision(17) << what << " at iteration " << iteration << " (strategy " << to_string(plan_.strategy)
        << "): l_ce=" << losses.l_ce << " l_simclr=" << losses.l_simclr << " l_mse=" << losses.l_mse
        << " l_total=" << losses.l_total << "; " << context;
    return msg.str();
  };
  if (!std::isfinite(losses.l_total)) throw TrainingError(dump("non-finite loss"));
  if (!params_.empty()) {
    total.backward();
    for (const Parameter* p : params_) {
      if (p->grad.size() && !p->grad.allFinite()) throw TrainingError(dump("non-finite gradient for " + p->name));
    }
    adam_.step(params_, schedule(iteration));
  }
  return losses;
}

Objective v_objective(FlipModel& model, const std::vector<FaceImage>& batch, std::span<const int> labels) {
  const ImageEncoding enc = model.image.encode(batch);
  const ag::Var l_ce = ag::ce_loss(model.head.forward(enc.class_token), labels);
  return {l_ce, ag::constant(Matrix::Zero(1, 1)), ag::constant(Matrix::Zero(1, 1)), l_ce};
}

Objective it_objective(FlipModel& model, const PromptSet& prompts, const std::vector<FaceImage>& batch,
                       std::span<const int> labels) {
  const ImageEncoding enc = model.image.encode(batch);
  const ClassEmbeddingVars cls = embed_prompt_set_graph(prompts, model.text);
  const ag::Var logits = ag::similarity_logits(enc.embedding, cls.ensemble, ag::leaf(model.logit_scale));
  const ag::Var l_ce = ag::ce_loss(logits, labels);
  return {l_ce, ag::constant(Matrix::Zero(1, 1)), ag::constant(Matrix::Zero(1, 1)), l_ce};
}

Objective mcl_objective(FlipModel& model, const PromptSet& prompts, const std::vector<AugmentedPair>& pairs,
                        const LossWeights& weights, double simclr_temperature) {
  const long n = static_cast<long>(pairs.size());
  if (n < 2) throw DomainError("MCL step needs at least 2 samples (the view contrast has no negatives otherwise)");

  std::vector<FaceImage> views;
  views.reserve(static_cast<std::size_t>(2 * n));
  std::vector<int> labels;
  std::vector<long> z1_rows, z2_rows;
  const long real_count = static_cast<long>(prompts.real.size());
  for (const auto& p : pairs) views.push_back(p.view1);
  for (const auto& p : pairs) {
    views.push_back(p.view2);
    labels.push_back(static_cast<int>(p.label));
    const long base = p.label == Label::Real ? 0 : real_count;
    z1_rows.push_back(base + p.prompt_index1);
    z2_rows.push_back(base + p.prompt_index2);
  }

  const ImageEncoding enc = model.image.encode(views);
  const ag::Var x1 = ag::slice_rows(enc.embedding, 0, n);
  const ag::Var x2 = ag::slice_rows(enc.embedding, n, n);
  const ClassEmbeddingVars cls = embed_prompt_set_graph(prompts, model.text);

  Objective o;
  o.l_ce = ag::ce_loss(ag::similarity_logits(x1, cls.ensemble, ag::leaf(model.logit_scale)), labels);
  const ag::Var h = model.projector.train_forward(enc.embedding);
  o.l_simclr = ag::simclr_loss(ag::slice_rows(h, 0, n), ag::slice_rows(h, n, n), simclr_temperature);
  o.l_mse = ag::mse_consistency(x1, ag::gather_rows(cls.per_prompt, z1_rows), x2,
                                ag::gather_rows(cls.per_prompt, z2_rows));
  o.total = ag::joint_loss(o.l_ce, o.l_simclr, o.l_mse, weights);
  return o;
}

StepLosses Trainer::step_v(const std::vector<FaceImage>& batch, std::span<const int> labels, long iteration) {
  for (const Parameter* p : params_) p->zero_grad();
  const Objective o = v_objective(model_, batch, labels);
  StepLosses out;
  out.l_ce = o.l_ce.scalar();
  return finish(o.total, out, iteration, "batch of " + std::to_string(batch.size()) + " images");
}

StepLosses Trainer::step_it(const std::vector<FaceImage>& batch, std::span<const int> labels, long iteration) {
  for (const Parameter* p : params_) p->zero_grad();
  const Objective o = it_objective(model_, prompts_, batch, labels);
  StepLosses out;
  out.l_ce = o.l_ce.scalar();
  return finish(o.total, out, iteration,
                "batch of " + std::to_string(batch.size()) + " images, logit_scale=" +
                    std::to_string(model_.logit_scale.value(0, 0)));
}

StepLosses Trainer::step_mcl(const std::vector<AugmentedPair>& pairs, long iteration) {
  for (const Parameter* p : params_) p->zero_grad();
  const Objective o = mcl_objective(model_, prompts_, pairs, plan_.weights, plan_.simclr_temperature);
  StepLosses out;
  out.l_ce = o.l_ce.scalar();
  out.l_simclr = o.l_simclr.scalar();
  out.l_mse = o.l_mse.scalar();
  return finish(o.total, out, iteration, "batch of " + std::to_string(pairs.size()) + " view pairs");
}

StepLosses Trainer::step(const std::vector<Sample>& batch, const ImageSource& images, long iteration) {
  const auto labels = labels_of(batch);
  if (plan_.strategy != Strategy::MCL) {
    std::vector<FaceImage> faces;
    faces.reserve(batch.size());
    for (const auto& s : batch) faces.push_back(normalize(images.load(s)));
    return plan_.strategy == Strategy::V ? step_v(faces, labels, iteration) : step_it(faces, labels, iteration);
  }
  std::vector<AugmentedPair> pairs;
  pairs.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng = derive_rng(plan_.seed, {0x7669u, static_cast<std::uint64_t>(iteration), i});
    pairs.push_back(make_views(images.load(batch[i]), batch[i].label, prompts_, plan_.augment, rng));
  }
  return step_mcl(pairs, iteration);
}

// ---------------------------------------------------------------------------
// Checkpoints

void Checkpoint::save(const std::filesystem::path& path) const {
  TensorArchive archive = model_state;
  for (const auto& [name, t] : optimizer_state.tensors) archive.tensors[name] = t;
  archive.metadata = optimizer_state.metadata;
  archive.metadata["flip.format"] = "1";
  archive.metadata["flip.iteration"] = std::to_string(iteration);
  archive.metadata["flip.strategy"] = to_string(plan.strategy);
  archive.metadata["flip.seed"] = std::to_string(plan.seed);
  archive.metadata["flip.config_hash"] = config_hash;
  archive.metadata["flip.code_version"] = code_version;
  archive.metadata["flip.model_config"] = model_config.to_json().dump();
  archive.metadata["flip.plan"] = plan.to_json().dump();
  archive.metadata["flip.sampler"] = sampler.to_json().dump();
  write_safetensors(path, archive, StorageType::F64);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  TensorArchive archive = read_safetensors(path);
  auto meta = [&](const std::string& key) -> const std::string& {
    const auto it = archive.metadata.find(key);
    if (it == archive.metadata.end()) throw IoError(path.string() + ": not a training checkpoint (missing " + key + ")");
    return it->second;
  };
  Checkpoint ck;
  try {
    ck.iteration = std::stol(meta("flip.iteration"));
    ck.config_hash = meta("flip.config_hash");
    ck.code_version = meta("flip.code_version");
    ck.model_config = ModelConfig::from_json(nlohmann::json::parse(meta("flip.model_config")));
    ck.plan = TrainPlan::from_json(nlohmann::json::parse(meta("flip.plan")));
    ck.sampler = SamplerState::from_json(nlohmann::json::parse(meta("flip.sampler")));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt checkpoint metadata: " + e.what());
  }
  for (auto& [name, t] : archive.tensors) {
    (name.rfind("adam.", 0) == 0 ? ck.optimizer_state : ck.model_state).tensors.emplace(name, std::move(t));
  }
  if (const auto it = archive.metadata.find("adam.t"); it != archive.metadata.end()) {
    ck.optimizer_state.metadata["adam.t"] = it->second;
  }
  return ck;
}

FlipModel Checkpoint::restore_model(BpeTokenizer tokenizer) const {
  FlipModel model(model_config, plan.seed, std::move(tokenizer));
  model.load_state(model_state);
  return model;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

constexpr const char* kLogHeader = "iteration,l_ce,l_simclr,l_mse,l_total,lr,wall_time";

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, long iteration) {
  std::ostringstream name;
  name << "checkpoint_" << std::setw(6) << std::setfill('0') << iteration << ".safetensors";
  return dir / name.str();
}

/// Keeps the log's preamble and every record up to `iteration`.
void truncate_log(const std::filesystem::path& log, long iteration) {
  std::vector<std::string> kept;
  std::ifstream in(log);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#' || line == kLogHeader) {
      kept.push_back(line);
      continue;
    }
    if (std::stol(line.substr(0, line.find(','))) <= iteration) kept.push_back(line);
  }
  in.close();
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}

}  // namespace

TrainResult run_training(FlipModel& model, const TrainPlan& plan, const ProtocolSplit& split,
                         const ImageSource& images, const PromptSet& prompts, const RunOptions& options) {
  plan.validate();
  split.validate();
  Trainer trainer(model, plan, prompts);
  BalancedSampler sampler(split, plan.per_domain_batch, plan.seed);
  if (plan.strategy == Strategy::MCL && sampler.batch_size() < 2) {
    throw ConfigError("MCL needs batches of at least 2 samples; raise train.per_domain_batch");
  }

  long start = 0;
  if (options.resume_from) {
    const Checkpoint ck = Checkpoint::load(*options.resume_from);
    if (ck.plan.strategy != plan.strategy) {
      throw ConfigError("cannot resume: checkpoint strategy " + to_string(ck.plan.strategy) + " differs from plan " +
                        to_string(plan.strategy));
    }
    if (!options.config_hash.empty() && !ck.config_hash.empty() && ck.config_hash != options.config_hash) {
      throw ConfigError("cannot resume: checkpoint config hash " + ck.config_hash + " differs from " +
                        options.config_hash);
    }
    if (ck.iteration > plan.iterations) throw ConfigError("cannot resume: checkpoint is past the planned iterations");
    model.load_state(ck.model_state);
    trainer.optimizer().load_state(ck.optimizer_state);
    sampler.restore(ck.sampler);
    start = ck.iteration;
  }

  const bool to_disk = !options.out_dir.empty();
  std::ofstream log;
  if (to_disk) {
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "train_log.csv";
    if (options.resume_from && std::filesystem::exists(log_path)) {
      truncate_log(log_path, start);
      log.open(log_path, std::ios::app);
    } else {
      log.open(log_path, std::ios::trunc);
      log << "# config_hash=" << options.config_hash << " seed=" << plan.seed << " code_version=" << kCodeVersion
          << " strategy=" << to_string(plan.strategy) << "\n"
          << kLogHeader << "\n";
    }
    if (!log) throw IoError("cannot write training log in " + options.out_dir.string());
    log << std::setprecision(17);
  }

  auto snapshot = [&](long iteration) {
    Checkpoint ck;
    ck.model_state = model.state();
    ck.optimizer_state = trainer.optimizer().state();
    ck.model_config = model.config();
    ck.plan = plan;
    ck.sampler = sampler.state();
    ck.iteration = iteration;
    ck.config_hash = options.config_hash;
    return ck;
  };

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (long it = start; it < plan.iterations; ++it) {
    const auto batch = sampler.next();
    StepLosses losses;
    auto diverged = [&](const std::string& what) {
      if (to_disk) {
        nlohmann::json dump{{"error", what}, {"iteration", it + 1}, {"config_hash", options.config_hash},
                            {"seed", plan.seed}, {"code_version", kCodeVersion}};
        for (const auto& s : batch) dump["batch"].push_back(s.key());
        std::ofstream(options.out_dir / ("divergence_" + std::to_string(it + 1) + ".json")) << dump.dump(2) << "\n";
      }
    };
    try {
      losses = trainer.step(batch, images, it);
    } catch (const TrainingError& e) {
      diverged(e.what());
      throw;
    } catch (const DomainError& e) {
      // Batch shapes were validated above, so this is a numerical breakdown
      // (e.g. an embedding collapsing to zero or NaN).
      const std::string what = std::string("numerical failure at iteration ") + std::to_string(it + 1) + ": " + e.what();
      diverged(what);
      throw TrainingError(what);
    }
    result.losses.push_back(losses);
    if (options.on_step) options.on_step(it + 1, losses);
    if (to_disk) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << (it + 1) << "," << losses.l_ce << "," << losses.l_simclr << "," << losses.l_mse << "," << losses.l_total
          << "," << trainer.schedule(it) << "," << wall << "\n";
      log.flush();
      if (plan.checkpoint_every > 0 && (it + 1) % plan.checkpoint_every == 0) {
        snapshot(it + 1).save(checkpoint_path(options.out_dir, it + 1));
      }
    }
  }
  result.checkpoint = snapshot(plan.iterations);
  if (to_disk) result.checkpoint.save(options.out_dir / "checkpoint_final.safetensors");
  return result;
}

}  // namespace flip
