#include "flip/losses.hpp"

namespace flip::ag {

Var similarity_logits(const Var& image_embeddings, const Var& class_embeddings, const Var& logit_scale) {
  Var cos = matmul_nt(l2_normalize_rows(image_embeddings), l2_normalize_rows(class_embeddings));
  return scale_by(cos, exp(logit_scale));
}

Var ce_loss(const Var& logits, std::span<const int> labels) {
  if (logits.cols() != 2) throw ShapeError("ce_loss: expected n x 2 logits");
  std::vector<long> targets;
  targets.reserve(labels.size());
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError("ce_loss: label outside {real, spoof}");
    targets.push_back(y);
  }
  return cross_entropy_rows(logits, targets);
}

Var simclr_loss(const Var& h1, const Var& h2, double temperature) {
  const long n = h1.rows();
  if (h2.rows() != n || h2.cols() != h1.cols()) throw ShapeError("simclr_loss: view batches differ in shape");
  if (n < 2) throw DomainError("simclr_loss: need at least 2 samples for negatives");
  if (!(temperature > 0)) throw DomainError("simclr_loss: temperature must be positive");
  Var z = l2_normalize_rows(concat_rows({h1, h2}));
  Var sim = scale(matmul_nt(z, z), 1.0 / temperature);
  std::vector<long> positives(static_cast<std::size_t>(2 * n));
  for (long k = 0; k < 2 * n; ++k) positives[static_cast<std::size_t>(k)] = k < n ? k + n : k - n;
  return cross_entropy_rows(sim, positives, true);
}

Var mse_consistency(const Var& x_v1, const Var& z_v1, const Var& x_v2, const Var& z_v2) {
  Var s1 = rowwise_dot(l2_normalize_rows(x_v1), l2_normalize_rows(z_v1));
  Var s2 = rowwise_dot(l2_normalize_rows(x_v2), l2_normalize_rows(z_v2));
  return mean(square(sub(s1, s2)));
}

Var joint_loss(const Var& l_ce, const Var& l_simclr, const Var& l_mse, const LossWeights& w) {
  w.validate();
  return add(add(scale(l_ce, w.alpha), scale(l_simclr, w.beta)), scale(l_mse, w.gamma));
}

}  // namespace flip::ag
