#include "flip/config.hpp"

#include "flip/errors.hpp"
#include "flip/json_util.hpp"

#include <fstream>

namespace flip {

namespace {

nlohmann::json optional_path(const std::optional<std::filesystem::path>& p) {
  return p ? nlohmann::json(p->generic_string()) : nlohmann::json(nullptr);
}

void read_path(JsonReader& r, const std::string& key, std::optional<std::filesystem::path>& out) {
  nlohmann::json v;
  r.optional(key, v);
  if (v.is_null()) return;
  if (!v.is_string()) {
    r.error(key, "expected a path string or null");
    return;
  }
  out = v.get<std::string>();
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  return {{"protocol", {{"id", to_string(protocol.id)}, {"scenario", protocol.scenario},
                        {"supplementary", protocol.supplementary}}},
          {"model", {{"preset", model.preset}, {"pretrained", optional_path(model.pretrained)},
                     {"merges", optional_path(model.merges)}}},
          {"eval", {{"threshold", eval.threshold}, {"fixed_threshold", eval.fixed_threshold},
                    {"fpr_target", eval.fpr_target}, {"batch_size", eval.batch_size},
                    {"baseline_dir", optional_path(eval.baseline_dir)}}},
          {"prompts", optional_path(prompts)},
          {"train", [this] {
             auto t = train.to_json();
             t.erase("seed");
             return t;
           }()},
          {"output_dir", output_dir.generic_string()},
          {"seeds", seeds}};
}

std::string RunConfig::hash() const { return config_hash(to_json()); }

ProtocolSpec RunConfig::protocol_spec() const { return find_protocol(protocol.id, protocol.scenario); }

ModelConfig RunConfig::model_config() const {
  return model.preset == "vit_b16" ? ModelConfig::vit_b16() : ModelConfig::toy();
}

BpeTokenizer RunConfig::tokenizer() const {
  return model.merges ? BpeTokenizer::from_merges_file(*model.merges) : BpeTokenizer();
}

PromptSet RunConfig::prompt_set() const { return prompts ? PromptSet::load(*prompts) : PromptSet::defaults(); }

ThresholdPolicy RunConfig::threshold_policy() const {
  return eval.threshold == "eer" ? ThresholdPolicy::Eer : ThresholdPolicy::Fixed;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  RunConfig c;
  JsonReader r(j, "", errors);

  {
    JsonReader p = r.child("protocol");
    std::string id = to_string(c.protocol.id);
    p.optional("id", id);
    try {
      c.protocol.id = parse_protocol_id(id);
    } catch (const ConfigError& e) {
      p.error("id", e.what());
    }
    p.optional("scenario", c.protocol.scenario);
    p.optional("supplementary", c.protocol.supplementary);
    p.finish();
    if (errors.empty()) {
      try {
        find_protocol(c.protocol.id, c.protocol.scenario);
      } catch (const ConfigError& e) {
        p.error("scenario", e.what());
      }
    }
  }
  {
    JsonReader m = r.child("model");
    m.optional("preset", c.model.preset);
    if (c.model.preset != "toy" && c.model.preset != "vit_b16") m.error("preset", "expected \"toy\" or \"vit_b16\"");
    read_path(m, "pretrained", c.model.pretrained);
    read_path(m, "merges", c.model.merges);
    m.finish();
    if (c.model.preset == "vit_b16" && !c.model.merges) {
      m.error("merges", "the vit_b16 preset needs the BPE merges file of its tokenizer");
    }
    if (c.model.preset == "toy" && c.model.pretrained) {
      m.error("pretrained", "pretrained weights require the vit_b16 preset");
    }
  }
  {
    JsonReader e = r.child("eval");
    e.optional("threshold", c.eval.threshold);
    if (c.eval.threshold != "fixed" && c.eval.threshold != "eer") e.error("threshold", "expected \"fixed\" or \"eer\"");
    e.optional("fixed_threshold", c.eval.fixed_threshold);
    e.optional("fpr_target", c.eval.fpr_target);
    if (!(c.eval.fpr_target > 0 && c.eval.fpr_target <= 1)) e.error("fpr_target", "must lie in (0, 1]");
    e.optional("batch_size", c.eval.batch_size);
    if (c.eval.batch_size < 1) e.error("batch_size", "must be at least 1");
    read_path(e, "baseline_dir", c.eval.baseline_dir);
    e.finish();
  }
  read_path(r, "prompts", c.prompts);

  {
    const bool has_batch = j.is_object() && j.contains("train") && j["train"].is_object() &&
                           j["train"].contains("per_domain_batch");
    if (j.is_object() && j.contains("train") && j["train"].is_object() && j["train"].contains("seed")) {
      errors.push_back("train.seed: seeds are set by the top-level \"seeds\" list");
    }
    nlohmann::json train = j.is_object() && j.contains("train") ? j["train"] : nlohmann::json::object();
    if (train.is_object()) train.erase("seed");
    r.child("train");  // marks the key as known
    c.train = TrainPlan::from_json(train, errors, "train");
    if (!has_batch) c.train.per_domain_batch = TrainPlan::for_protocol(c.protocol.id).per_domain_batch;
  }

  std::string out = c.output_dir.generic_string();
  r.optional("output_dir", out);
  c.output_dir = out;
  r.optional("seeds", c.seeds);
  if (c.seeds.empty()) r.error("seeds", "need at least one seed");
  r.finish();
  c.train.collect_errors(errors);
  throw_if_errors(errors, "run config");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

std::string apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + assignment + "': '" + part + "' is not inside an object");
      *node = nlohmann::json::object();
    }
    if (dot == std::string::npos) {
      const std::string old = node->contains(part) ? (*node)[part].dump() : "<default>";
      (*node)[part] = value;
      return "override " + key + ": " + old + " -> " + value.dump();
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace flip
