#include "flip/prompts.hpp"

#include "flip/encoders.hpp"
#include "flip/errors.hpp"

#include <json.hpp>

#include <fstream>

namespace flip {

const char* to_string(Label l) { return l == Label::Real ? "real" : "spoof"; }

Label parse_label(const std::string& s) {
  if (s == "real" || s == "0") return Label::Real;
  if (s == "spoof" || s == "1") return Label::Spoof;
  throw ConfigError("label must be 'real' or 'spoof', got '" + s + "'");
}

PromptSet PromptSet::defaults() {
  return PromptSet{
      {"This is an example of a real face", "This is a bonafide face", "This is a real face",
       "This is how a real face looks like", "A photo of a real face", "This is not a spoof face"},
      {"This is an example of a spoof face", "This is an example of an attack face", "This is not a real face",
       "This is how a spoof face looks like", "A photo of a spoof face", "A printout shown to be a spoof face"}};
}

PromptSet PromptSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt catalog " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("prompt catalog " + path.string() + " is not valid JSON: " + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    if (key != "real" && key != "spoof") throw ConfigError("prompt catalog: unknown class '" + key + "'");
  }
  PromptSet ps;
  try {
    ps.real = j.at("real").get<std::vector<std::string>>();
    ps.spoof = j.at("spoof").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("prompt catalog " + path.string() + ": " + e.what());
  }
  ps.validate();
  return ps;
}

void PromptSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write prompt catalog " + path.string());
  out << nlohmann::json{{"real", real}, {"spoof", spoof}}.dump(2) << "\n";
}

void PromptSet::validate() const {
  if (real.empty() || spoof.empty()) throw ConfigError("prompt set: each class needs at least one prompt");
  for (const auto* list : {&real, &spoof}) {
    for (const auto& p : *list) {
      if (p.empty()) throw ConfigError("prompt set: empty prompt text");
    }
  }
}

std::vector<std::string> PromptSet::all() const {
  std::vector<std::string> out = real;
  out.insert(out.end(), spoof.begin(), spoof.end());
  return out;
}

RowVector ClassEmbeddings::prompt(Label l, long i) const {
  return per_prompt.row(l == Label::Real ? i : real_count + i);
}

ag::Var ensemble_mean(const ag::Var& rows) {
  const Matrix avg = Matrix::Constant(1, rows.rows(), 1.0 / static_cast<double>(rows.rows()));
  return ag::matmul(ag::constant(avg), rows);
}

ClassEmbeddingVars embed_prompt_set_graph(const PromptSet& ps, const TextEncoder& enc) {
  ps.validate();
  ClassEmbeddingVars out;
  out.real_count = static_cast<long>(ps.real.size());
  out.per_prompt = enc.encode(ps.all());
  const long n_spoof = static_cast<long>(ps.spoof.size());
  out.ensemble = ag::concat_rows({ensemble_mean(ag::slice_rows(out.per_prompt, 0, out.real_count)),
                                  ensemble_mean(ag::slice_rows(out.per_prompt, out.real_count, n_spoof))});
  return out;
}

ClassEmbeddings embed_prompt_set(const PromptSet& ps, const TextEncoder& enc) {
  ag::NoGradGuard guard;
  const auto vars = embed_prompt_set_graph(ps, enc);
  ClassEmbeddings out;
  out.per_prompt = vars.per_prompt.value();
  out.real_count = vars.real_count;
  out.z_real = vars.ensemble.value().row(0);
  out.z_spoof = vars.ensemble.value().row(1);
  return out;
}

std::pair<long, long> sample_prompt_view_indices(const PromptSet& ps, Label label, Rng& rng) {
  const long n = static_cast<long>(ps.of(label).size());
  if (n < 2) {
    throw ConfigError(std::string("cannot sample two different prompts: class '") + to_string(label) +
                      "' has " + std::to_string(n) + " prompt(s)");
  }
  const long a = uniform_index(rng, n);
  long b = uniform_index(rng, n - 1);
  if (b >= a) ++b;
  return {a, b};
}

std::pair<std::string, std::string> sample_prompt_views(const PromptSet& ps, Label label, Rng& rng) {
  const auto [a, b] = sample_prompt_view_indices(ps, label, rng);
  const auto& list = ps.of(label);
  return {list[static_cast<std::size_t>(a)], list[static_cast<std::size_t>(b)]};
}

}  // namespace flip
