#include "flip/cli.hpp"

#include "flip/config.hpp"
#include "flip/data.hpp"
#include "flip/errors.hpp"
#include "flip/evaluation.hpp"
#include "flip/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace flip {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  throw UsageError(std::string("no datasets root: set ") + kDataRootEnv + " or pass --data-root");
}

fs::path seed_dir(const RunConfig& cfg, std::uint64_t seed) { return cfg.output_dir / ("seed_" + std::to_string(seed)); }

std::string provenance(const std::string& hash, std::uint64_t seed) {
  return "config_hash=" + hash + " seed=" + std::to_string(seed) + " code_version=" + kCodeVersion;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides, std::ostream& err,
                      std::vector<std::string>* log_lines = nullptr) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) {
    const std::string line = apply_override(j, o);
    err << line << "\n";
    if (log_lines) log_lines->push_back(line);
  }
  return RunConfig::from_json(j);
}

BpeTokenizer tokenizer_for(const ModelConfig& mc, const std::optional<fs::path>& merges) {
  if (merges) return BpeTokenizer::from_merges_file(*merges);
  BpeTokenizer byte_level;
  if (mc.text.vocab_size != byte_level.vocab_size()) {
    throw UsageError("this model's text vocabulary needs its BPE merges file (--merges)");
  }
  return byte_level;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string describe(const ProtocolSpec& spec) {
  std::ostringstream s;
  s << "protocol " << to_string(spec.id) << "  " << spec.label << "\n  sources:";
  for (const auto& d : spec.sources) s << " " << d.code << " (" << d.name << ")";
  if (spec.id == ProtocolId::UnseenSpoof) {
    s << "\n  train: 80% of real and of the seen attack type from every source"
      << "\n  test:  held-out 20% of real plus 20% of " << to_string(spec.unseen_attack) << " attacks";
  } else {
    s << "\n  target: " << spec.target.code << " (" << spec.target.name << ")";
  }
  return s.str();
}

// ---------------------------------------------------------------------------

int cmd_protocols(const std::string& action, const std::string& id, const std::string& scenario, std::ostream& out) {
  std::vector<ProtocolId> ids;
  if (id.empty()) {
    ids = {ProtocolId::One, ProtocolId::Two, ProtocolId::Three, ProtocolId::UnseenSpoof};
  } else {
    try {
      ids = {parse_protocol_id(id)};
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (action == "describe") {
    if (ids.size() != 1 || scenario.empty()) throw UsageError("describe needs --protocol and --scenario");
    out << describe(find_protocol(ids.front(), scenario)) << "\n";
    return 0;
  }
  for (ProtocolId pid : ids) {
    for (const auto& spec : enumerate_protocols(pid)) {
      out << std::left << std::setw(14) << to_string(pid) << spec.label;
      out << "   sources=";
      for (std::size_t i = 0; i < spec.sources.size(); ++i) out << (i ? "," : "") << spec.sources[i].code;
      out << " target=" << spec.target.code << "\n";
    }
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& root_flag,
              bool resume, std::ostream& out, std::ostream& err) {
  std::vector<std::string> log_lines;
  const RunConfig cfg = load_config(config_path, overrides, err, &log_lines);
  const std::string hash = cfg.hash();
  const fs::path root = data_root(root_flag);
  fs::create_directories(cfg.output_dir);
  nlohmann::json snapshot = cfg.to_json();
  snapshot["config_hash"] = hash;
  snapshot["code_version"] = kCodeVersion;
  write_json(cfg.output_dir / "config.json", snapshot);
  if (!log_lines.empty()) {
    std::ofstream log(cfg.output_dir / "overrides.log", std::ios::app);
    for (const auto& l : log_lines) log << l << "\n";
  }

  const ProtocolSpec spec = cfg.protocol_spec();
  const PromptSet prompts = cfg.prompt_set();
  const ModelConfig mc = cfg.model_config();
  DiskImageSource images(mc.vision.image_size);
  for (std::uint64_t seed : cfg.seeds) {
    TrainPlan plan = cfg.train;
    plan.seed = seed;
    const ProtocolSplit split =
        build_protocol(spec, manifest_loader(root), plan.shots, seed, cfg.protocol.supplementary);
    FlipModel model = cfg.model.pretrained ? load_pretrained(*cfg.model.pretrained, mc, cfg.tokenizer(), seed)
                                           : FlipModel(mc, seed, cfg.tokenizer());
    RunOptions opts;
    opts.out_dir = seed_dir(cfg, seed);
    opts.config_hash = hash;
    if (resume && fs::exists(opts.out_dir)) {
      std::optional<fs::path> latest;
      for (const auto& entry : fs::directory_iterator(opts.out_dir)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("checkpoint_", 0) == 0 && name != "checkpoint_final.safetensors" &&
            (!latest || name > latest->filename().string())) {
          latest = entry.path();
        }
      }
      if (fs::exists(opts.out_dir / "checkpoint_final.safetensors")) {
        out << "seed " << seed << ": already complete\n";
        continue;
      }
      opts.resume_from = latest;
    }
    out << "seed " << seed << ": training FLIP-" << to_string(plan.strategy) << " on " << spec.label << " ("
        << split.train_pool().size() << " training samples, " << plan.iterations << " iterations)"
        << (opts.resume_from ? " resuming from " + opts.resume_from->filename().string() : std::string()) << "\n";
    const TrainResult r = run_training(model, plan, split, images, prompts, opts);
    if (!r.losses.empty()) out << "seed " << seed << ": final loss " << r.losses.back().l_total << "\n";
  }
  out << "config hash " << hash << "\n";
  return 0;
}

std::vector<MetricReport> load_seed_metrics(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("run directory " + dir.string() + " does not exist");
  std::vector<std::pair<std::uint64_t, MetricReport>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto metrics = entry.path() / "metrics.json";
    if (entry.is_directory() && fs::exists(metrics)) {
      std::ifstream in(metrics);
      MetricReport r = MetricReport::from_json(nlohmann::json::parse(in));
      found.emplace_back(r.seed, r);
    }
  }
  if (found.empty()) throw UsageError("no seed_*/metrics.json under " + dir.string());
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<MetricReport> out;
  for (auto& [seed, r] : found) out.push_back(r);
  return out;
}

/// Pairs the two runs by seed and tests whether `a` has the lower HTER.
nlohmann::json ttest_by_seed(const std::vector<MetricReport>& a, const std::vector<MetricReport>& b, std::ostream& out) {
  std::map<std::uint64_t, double> base;
  for (const auto& r : b) base[r.seed] = r.hter;
  std::vector<double> xa, xb;
  for (const auto& r : a) {
    const auto it = base.find(r.seed);
    if (it == base.end()) throw UsageError("baseline has no result for seed " + std::to_string(r.seed));
    xa.push_back(r.hter);
    xb.push_back(it->second);
  }
  const TTestResult t = paired_ttest(xa, xb);
  out << "paired one-sided t-test (HTER lower than baseline): t=" << t.t << " df=" << t.df << " p=" << t.p
      << (t.reject ? "  significant at 0.05\n" : "  not significant at 0.05\n");
  return {{"t", t.t}, {"df", t.df}, {"p", t.p}, {"reject", t.reject}, {"pairs", xa.size()}};
}

void summarize(const std::vector<MetricReport>& reports, const fs::path& dir, double fpr_target, std::ostream& out) {
  if (reports.size() >= 2) {
    const AggregateReport agg = aggregate_seeds(reports);
    write_json(dir / "aggregate.json", agg.to_json());
    const std::string table = render_summary_table({{"FLIP-" + agg.strategy, {agg}}}, fpr_target);
    std::ofstream(dir / "summary.txt") << table;
    out << table;
  } else {
    const auto& r = reports.front();
    out << r.protocol << " seed " << r.seed << ": HTER " << 100 * r.hter << "%  AUC " << 100 * r.auc << "%  TPR@FPR "
        << 100 * r.tpr_at_fpr << "%\n";
  }
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::vector<std::string>& checkpoints, const std::string& baseline_flag, const std::string& root_flag,
             std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_config(config_path, overrides, err);
  const std::string hash = cfg.hash();
  std::optional<fs::path> baseline = cfg.eval.baseline_dir;
  if (!baseline_flag.empty()) baseline = baseline_flag;
  if (baseline && !fs::is_directory(*baseline)) {
    throw UsageError("t-test requested but baseline directory " + baseline->string() + " does not exist");
  }
  const fs::path root = data_root(root_flag);

  std::vector<fs::path> paths;
  for (const auto& c : checkpoints) paths.emplace_back(c);
  if (paths.empty()) {
    for (std::uint64_t seed : cfg.seeds) paths.push_back(seed_dir(cfg, seed) / "checkpoint_final.safetensors");
  }

  const ProtocolSpec spec = cfg.protocol_spec();
  const PromptSet prompts = cfg.prompt_set();
  std::vector<MetricReport> reports;
  for (const auto& path : paths) {
    if (!fs::exists(path)) throw UsageError("checkpoint " + path.string() + " does not exist");
    const Checkpoint ck = Checkpoint::load(path);
    if (ck.plan.strategy != cfg.train.strategy) {
      throw ConfigError("checkpoint/strategy mismatch: " + path.string() + " was trained with FLIP-" +
                        to_string(ck.plan.strategy) + " but the config selects FLIP-" + to_string(cfg.train.strategy));
    }
    FlipModel model = ck.restore_model(tokenizer_for(ck.model_config, cfg.model.merges));
    const ProtocolSplit split =
        build_protocol(spec, manifest_loader(root, false), ck.plan.shots, ck.plan.seed, cfg.protocol.supplementary);
    DiskImageSource images(ck.model_config.vision.image_size);
    const ScoreSet scores = infer_scores(model, ck.plan.strategy, split.test_pool(), images, prompts, cfg.eval.batch_size);
    if (scores.missing) err << "warning: " << scores.missing << " test image(s) could not be read and were skipped\n";

    MetricReport r = evaluate_scores(scores, cfg.threshold_policy(), cfg.eval.fixed_threshold, cfg.eval.fpr_target);
    r.protocol = spec.label;
    r.strategy = to_string(ck.plan.strategy);
    r.seed = ck.plan.seed;
    r.config_hash = hash;
    const fs::path dir = seed_dir(cfg, ck.plan.seed);
    fs::create_directories(dir);
    scores.save(dir / "scores.csv", provenance(hash, r.seed));
    write_json(dir / "metrics.json", r.to_json());
    write_roc_csv(dir / "roc.csv", roc_curve(scores));
    reports.push_back(r);
  }
  summarize(reports, cfg.output_dir, cfg.eval.fpr_target, out);
  if (baseline) write_json(cfg.output_dir / "ttest.json", ttest_by_seed(reports, load_seed_metrics(*baseline), out));
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& prompts_path,
              const std::string& merges, std::ostream& out) {
  const Checkpoint ck = Checkpoint::load(checkpoint);
  FlipModel model =
      ck.restore_model(tokenizer_for(ck.model_config, merges.empty() ? std::nullopt : std::optional<fs::path>(merges)));
  const PromptSet prompts = prompts_path.empty() ? PromptSet::defaults() : PromptSet::load(prompts_path);
  const FaceImage face = normalize(load_image(image, ck.model_config.vision.image_size));
  const double p = score_image(model, ck.plan.strategy, face, prompts);
  out << std::setprecision(6) << "p_real=" << p << " prediction=" << (p >= 0.5 ? "real" : "spoof") << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& baseline, double fpr_target,
               const std::string& out_path, std::ostream& out) {
  if (runs.empty()) throw UsageError("report needs at least one --run directory");
  std::vector<SummaryRow> rows;
  std::vector<std::vector<MetricReport>> all;
  for (const auto& run : runs) {
    auto reports = load_seed_metrics(run);
    const AggregateReport agg = aggregate_seeds(reports);
    rows.push_back({fs::path(run).filename().string() + " (FLIP-" + agg.strategy + ")", {agg}});
    all.push_back(std::move(reports));
  }
  std::string table = render_summary_table(rows, fpr_target);
  out << table;
  nlohmann::json report{{"runs", runs}};
  for (const auto& row : rows) report["aggregates"].push_back(row.scenarios.front().to_json());
  if (!baseline.empty()) report["ttest"] = ttest_by_seed(all.front(), load_seed_metrics(baseline), out);
  if (!out_path.empty()) write_json(out_path, report);
  return 0;
}

int cmd_synth(const std::string& out_dir, const std::vector<std::string>& domains, long per_class, long size,
              std::uint64_t seed, std::ostream& out) {
  SyntheticSpec spec;
  if (!domains.empty()) spec.domains = domains;
  spec.per_class = per_class;
  spec.image_size = size;
  spec.seed = seed;
  write_synthetic(out_dir, spec);
  out << "wrote " << spec.domains.size() << " synthetic domains under " << out_dir << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-domain face anti-spoofing with a finetuned image-text dual encoder"};
  app.require_subcommand(1);

  std::string config, data_root_flag, baseline, scenario, protocol_id, checkpoint, image, prompts, merges, out_path;
  std::vector<std::string> overrides, checkpoints, runs, domains;
  bool resume = false;
  double fpr_target = 0.01;
  long per_class = 24, size = 224;
  std::uint64_t seed = 7;

  auto* train = app.add_subcommand("train", "train one model per seed in the config");
  train->add_option("--config,-c", config, "run config (JSON)")->required();
  train->add_option("--set", overrides, "override a config field, e.g. --set train.lr=1e-5");
  train->add_option("--data-root", data_root_flag, std::string("datasets root (default: $") + kDataRootEnv + ")");
  train->add_flag("--resume", resume, "continue each seed from its latest checkpoint");

  auto* eval = app.add_subcommand("eval", "score the target domain and compute metrics");
  eval->add_option("--config,-c", config, "run config (JSON)")->required();
  eval->add_option("--set", overrides, "override a config field");
  eval->add_option("--checkpoint", checkpoints, "checkpoint(s); default: every seed's final checkpoint");
  eval->add_option("--baseline", baseline, "run directory to compare against with a paired t-test");
  eval->add_option("--data-root", data_root_flag, "datasets root");

  auto* infer = app.add_subcommand("infer", "p_real for a single face image");
  infer->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  infer->add_option("--image", image, "pre-cropped face image")->required();
  infer->add_option("--prompts", prompts, "prompt catalog (JSON)");
  infer->add_option("--merges", merges, "BPE merges file for full-size text encoders");

  auto* protocols = app.add_subcommand("protocols", "list or describe evaluation protocols");
  std::string action = "list";
  protocols->add_option("action", action, "list | describe")->check(CLI::IsMember({"list", "describe"}));
  protocols->add_option("--protocol,-p", protocol_id, "1, 2, 3 or unseen-spoof");
  protocols->add_option("--scenario,-s", scenario, "target code, S->T pair or attack name");

  auto* report = app.add_subcommand("report", "aggregate finished runs, optional t-test against a baseline");
  report->add_option("--run", runs, "run directory (holds seed_*/metrics.json)")->required();
  report->add_option("--baseline", baseline, "baseline run directory");
  report->add_option("--fpr", fpr_target, "FPR used for the TPR column header");
  report->add_option("--out", out_path, "write the report as JSON");

  auto* synth = app.add_subcommand("synth", "write a procedurally generated stand-in dataset");
  synth->add_option("--out", out_path, "output root")->required();
  synth->add_option("--domains", domains, "domain names (default: two generic domains)")->delimiter(',');
  synth->add_option("--per-class", per_class, "samples per class and domain");
  synth->add_option("--size", size, "image side length");
  synth->add_option("--seed", seed, "generator seed");

  auto* show = app.add_subcommand("config", "validate a config and print its canonical form and hash");
  show->add_option("--config,-c", config, "run config (JSON)")->required();
  show->add_option("--set", overrides, "override a config field");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(config, overrides, data_root_flag, resume, out, err);
    if (*eval) return cmd_eval(config, overrides, checkpoints, baseline, data_root_flag, out, err);
    if (*infer) return cmd_infer(checkpoint, image, prompts, merges, out);
    if (*protocols) return cmd_protocols(action, protocol_id, scenario, out);
    if (*report) return cmd_report(runs, baseline, fpr_target, out_path, out);
    if (*synth) return cmd_synth(out_path, domains, per_class, size, seed, out);
    if (*show) {
      const RunConfig cfg = load_config(config, overrides, err);
      out << cfg.to_json().dump(2) << "\nconfig hash " << cfg.hash() << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace flip
