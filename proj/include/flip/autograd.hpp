#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Every value is a row-major-semantics Eigen::MatrixXd (rows = tokens or
// batch samples, columns = features). A Var is a handle to a node in a
// dynamically built graph; calling backward() on a 1x1 Var propagates
// gradients to every reachable node and accumulates them into the
// Parameter objects that leaf nodes were created from.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace flip {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// A named trainable (or buffer) tensor. Values are stored as matrices;
/// `shape` keeps the logical tensor shape used on disk.
struct Parameter {
  std::string name;
  std::vector<long> shape;
  Matrix value;
  mutable Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<long> s, Matrix v, bool train = true);

  void zero_grad() const;
  long numel() const { return value.size(); }
};

namespace ag {

struct Node {
  Matrix owned;
  const Matrix* external = nullptr;
  Matrix grad;
  bool requires_grad = false;
  const Parameter* param = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  const Matrix& value() const { return external ? *external : owned; }
  /// Lazily allocated gradient buffer shaped like value().
  Matrix& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value(); }
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Seeds d(self)/d(self) = 1 and runs the reverse sweep. Requires a 1x1 value.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording in its scope (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
Var leaf(const Parameter& p);

// Elementwise / structural
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);  // s is 1x1
Var exp(const Var& a);
Var add_row(const Var& a, const Var& row);  // broadcast 1xC row over rows
Var mul_row(const Var& a, const Var& row);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var slice_cols(const Var& a, long start, long count);
Var slice_rows(const Var& a, long start, long count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& a, const std::vector<long>& index);
Var reshape(const Var& a, long rows, long cols);  // row-major reinterpretation
Var sum(const Var& a);
Var mean(const Var& a);
Var square(const Var& a);

// Nonlinearities and normalizations
Var relu(const Var& a);
Var quick_gelu(const Var& a);
Var softmax_rows(const Var& a, bool causal = false);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a);
Var rowwise_dot(const Var& a, const Var& b);  // -> n x 1

/// Batch normalization with batch statistics (biased variance). Updates the
/// running buffers with `momentum` when they are non-null.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                     Matrix* running_mean, Matrix* running_var, double momentum);

/// Mean over rows of -log softmax(logits)[target]. When `exclude_diagonal` is
/// set, entry (i, i) is removed from row i's softmax (NT-Xent form).
Var cross_entropy_rows(const Var& logits, const std::vector<long>& targets,
                       bool exclude_diagonal = false);

Var linear(const Var& x, const Var& weight, const Var* bias);

}  // namespace ag
}  // namespace flip
