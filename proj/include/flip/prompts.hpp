#pragma once

#include "flip/autograd.hpp"
#include "flip/random.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace flip {

class TextEncoder;

enum class Label { Real = 0, Spoof = 1 };

const char* to_string(Label l);
Label parse_label(const std::string& s);

/// Natural-language descriptions of each class.
struct PromptSet {
  std::vector<std::string> real;
  std::vector<std::string> spoof;

  /// The six real / six spoof context prompts used by default.
  static PromptSet defaults();
  /// JSON file of the form {"real": [...], "spoof": [...]}.
  static PromptSet load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<std::string>& of(Label l) const { return l == Label::Real ? real : spoof; }
  /// Throws ConfigError when a class is empty or holds an empty prompt.
  void validate() const;
  /// Real prompts followed by spoof prompts.
  std::vector<std::string> all() const;
};

/// Ensemble (mean) embedding per class plus every per-prompt embedding.
struct ClassEmbeddings {
  Matrix per_prompt;  // (P_real + P_spoof) x d_vl, real rows first
  long real_count = 0;
  RowVector z_real;
  RowVector z_spoof;

  long spoof_count() const { return per_prompt.rows() - real_count; }
  RowVector prompt(Label l, long i) const;
};

/// Arithmetic mean of the rows of `rows`, with graph support.
ag::Var ensemble_mean(const ag::Var& rows);

/// Differentiable ensemble: 2 x d_vl (real, spoof) and the per-prompt rows.
struct ClassEmbeddingVars {
  ag::Var per_prompt;
  ag::Var ensemble;  // row 0 = z_real, row 1 = z_spoof
  long real_count = 0;
};

ClassEmbeddingVars embed_prompt_set_graph(const PromptSet& ps, const TextEncoder& enc);

/// Inference-time snapshot (no graph).
ClassEmbeddings embed_prompt_set(const PromptSet& ps, const TextEncoder& enc);

/// Two distinct prompt indices of `label`'s list, uniformly over ordered pairs.
std::pair<long, long> sample_prompt_view_indices(const PromptSet& ps, Label label, Rng& rng);
std::pair<std::string, std::string> sample_prompt_views(const PromptSet& ps, Label label, Rng& rng);

}  // namespace flip
