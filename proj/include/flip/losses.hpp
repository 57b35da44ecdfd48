#pragma once

// Training objectives. The templated free functions evaluate losses on plain
// Eigen data; the ag:: overloads build the same quantities inside a graph so
// they can be differentiated during training.

#include "flip/autograd.hpp"
#include "flip/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <utility>
#include <vector>

namespace flip {

struct LossWeights {
  double alpha = 1.0;  // cross-entropy
  double beta = 1.0;   // view contrast (NT-Xent)
  double gamma = 1.0;  // image-text view consistency

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be nonnegative");
    if (alpha == 0 && beta == 0 && gamma == 0) throw ConfigError("loss weights must not all be zero");
  }
};

template <typename Scalar>
struct SimilarityLogits {
  Scalar s_real;
  Scalar s_spoof;
  Scalar temperature;
};

template <typename A, typename B>
typename A::Scalar cosine_sim(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  using Scalar = typename A::Scalar;
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (!(na > Scalar(0)) || !(nb > Scalar(0))) throw DomainError("cosine_sim: zero-norm vector");
  const Scalar c = a.cwiseProduct(b.derived().template cast<Scalar>()).sum() / (na * nb);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// (p_real, p_spoof) = softmax(s / tau).
template <typename Scalar>
std::pair<Scalar, Scalar> similarity_softmax(const SimilarityLogits<Scalar>& l) {
  if (!(l.temperature > Scalar(0))) throw DomainError("similarity_softmax: temperature must be positive");
  const Scalar a = l.s_real / l.temperature;
  const Scalar b = l.s_spoof / l.temperature;
  const Scalar m = std::max(a, b);
  const Scalar ea = std::exp(a - m);
  const Scalar eb = std::exp(b - m);
  const Scalar p_real = ea / (ea + eb);
  return {p_real, eb / (ea + eb)};
}

/// Mean negative log-likelihood of `labels` (0 = real, 1 = spoof) under a
/// row-wise softmax of the n x 2 logits.
template <typename Derived>
typename Derived::Scalar ce_loss(const Eigen::MatrixBase<Derived>& logits, std::span<const int> labels) {
  using Scalar = typename Derived::Scalar;
  if (logits.rows() == 0) throw ShapeError("ce_loss: empty batch");
  if (logits.cols() != 2 || logits.rows() != static_cast<long>(labels.size())) {
    throw ShapeError("ce_loss: expected n x 2 logits and n labels");
  }
  Scalar total(0);
  for (long i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y != 0 && y != 1) throw DomainError("ce_loss: label outside {real, spoof}");
    const Scalar m = logits.row(i).maxCoeff();
    const Scalar lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, y);
  }
  return total / static_cast<Scalar>(logits.rows());
}

/// NT-Xent over the 2n views [h1; h2]: anchor k's positive is its
/// counterpart, every other view is a negative; mean over all 2n anchors.
template <typename D1, typename D2>
typename D1::Scalar simclr_loss(const Eigen::MatrixBase<D1>& h1, const Eigen::MatrixBase<D2>& h2,
                                typename D1::Scalar temperature) {
  using Scalar = typename D1::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const long n = h1.rows();
  if (h2.rows() != n || h2.cols() != h1.cols()) throw ShapeError("simclr_loss: view batches differ in shape");
  if (n < 2) throw DomainError("simclr_loss: need at least 2 samples for negatives");
  if (!(temperature > Scalar(0))) throw DomainError("simclr_loss: temperature must be positive");
  Mat z(2 * n, h1.cols());
  z << h1, h2;
  for (long i = 0; i < z.rows(); ++i) {
    const Scalar norm = z.row(i).norm();
    if (!(norm > Scalar(0))) throw DomainError("simclr_loss: zero-norm projection");
    z.row(i) /= norm;
  }
  const Mat sim = (z * z.transpose()) / temperature;
  Scalar total(0);
  for (long k = 0; k < 2 * n; ++k) {
    const long pos = k < n ? k + n : k - n;
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (long j = 0; j < 2 * n; ++j) {
      if (j != k) m = std::max(m, sim(k, j));
    }
    Scalar denom(0);
    for (long j = 0; j < 2 * n; ++j) {
      if (j != k) denom += std::exp(sim(k, j) - m);
    }
    total += -(sim(k, pos) - m - std::log(denom));
  }
  return total / static_cast<Scalar>(2 * n);
}

/// (sim(x1, z1) - sim(x2, z2))^2
template <typename A, typename B, typename C, typename D>
typename A::Scalar mse_consistency(const Eigen::MatrixBase<A>& x_v1, const Eigen::MatrixBase<B>& z_v1,
                                   const Eigen::MatrixBase<C>& x_v2, const Eigen::MatrixBase<D>& z_v2) {
  const auto d = cosine_sim(x_v1, z_v1) - cosine_sim(x_v2, z_v2);
  return d * d;
}

template <typename Scalar>
Scalar joint_loss(Scalar l_ce, Scalar l_simclr, Scalar l_mse, const LossWeights& w) {
  return Scalar(w.alpha) * l_ce + Scalar(w.beta) * l_simclr + Scalar(w.gamma) * l_mse;
}

namespace ag {

/// n x 2 class logits exp(logit_scale) * cos(x_i, z_c), column 0 = real.
Var similarity_logits(const Var& image_embeddings, const Var& class_embeddings, const Var& logit_scale);
Var ce_loss(const Var& logits, std::span<const int> labels);
Var simclr_loss(const Var& h1, const Var& h2, double temperature);
/// Batch mean of (cos(x1_i, z1_i) - cos(x2_i, z2_i))^2.
Var mse_consistency(const Var& x_v1, const Var& z_v1, const Var& x_v2, const Var& z_v2);
Var joint_loss(const Var& l_ce, const Var& l_simclr, const Var& l_mse, const LossWeights& w);

}  // namespace ag
}  // namespace flip
