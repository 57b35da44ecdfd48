#include "flip/autograd.hpp"

#include "flip/errors.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

namespace flip {

Parameter::Parameter(std::string n, std::vector<long> s, Matrix v, bool train)
    : name(std::move(n)), shape(std::move(s)), value(std::move(v)), trainable(train) {
  grad = Matrix::Zero(value.rows(), value.cols());
}

void Parameter::zero_grad() const {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  } else {
    grad.setZero();
  }
}

namespace ag {
namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->owned = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

// Accumulates into parent `i` only when that parent participates in the graph.
template <typename Expr>
void accumulate(Node& self, std::size_t i, const Expr& g) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return;
  p.grad_buffer() += g;
}

}  // namespace

Matrix& Node::grad_buffer() {
  const Matrix& v = value();
  if (grad.rows() != v.rows() || grad.cols() != v.cols()) grad = Matrix::Zero(v.rows(), v.cols());
  return grad;
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("scalar(): value is not 1x1");
  return value()(0, 0);
}

void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("backward(): output is not 1x1");
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (n->param) {
      if (n->param->grad.rows() != n->grad.rows() || n->param->grad.cols() != n->grad.cols()) {
        n->param->zero_grad();
      }
      n->param->grad += n->grad;
    }
  }
  // Release intermediate gradient buffers; parameters keep theirs.
  for (Node* n : order) n->grad.resize(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->owned = std::move(value);
  return Var(std::move(node));
}

Var leaf(const Parameter& p) {
  auto node = std::make_shared<Node>();
  node->external = &p.value;
  if (g_grad_enabled && p.trainable) {
    node->requires_grad = true;
    node->param = &p;
  }
  return Var(std::move(node));
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make(a.value() + b.value(), {a, b}, [](Node& s) {
    accumulate(s, 0, s.grad);
    accumulate(s, 1, s.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& s) {
    accumulate(s, 0, s.grad);
    accumulate(s, 1, -s.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
    accumulate(s, 0, s.grad.cwiseProduct(s.parents[1]->value()));
    accumulate(s, 1, s.grad.cwiseProduct(s.parents[0]->value()));
  });
}

Var scale(const Var& a, double k) {
  return make(a.value() * k, {a}, [k](Node& s) { accumulate(s, 0, s.grad * k); });
}

Var scale_by(const Var& a, const Var& k) {
  if (k.rows() != 1 || k.cols() != 1) throw ShapeError("scale_by: factor must be 1x1");
  return make(a.value() * k.value()(0, 0), {a, k}, [](Node& s) {
    const double f = s.parents[1]->value()(0, 0);
    accumulate(s, 0, s.grad * f);
    Matrix gk(1, 1);
    gk(0, 0) = s.grad.cwiseProduct(s.parents[0]->value()).sum();
    accumulate(s, 1, gk);
  });
}

Var exp(const Var& a) {
  return make(a.value().array().exp().matrix(), {a}, [](Node& s) {
    accumulate(s, 0, s.grad.cwiseProduct(s.owned));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& s) {
    accumulate(s, 0, s.grad);
    accumulate(s, 1, s.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row shape mismatch");
  Matrix out = a.value();
  out.array().rowwise() *= row.value().row(0).array();
  return make(std::move(out), {a, row}, [](Node& s) {
    const Matrix& av = s.parents[0]->value();
    const Matrix& rv = s.parents[1]->value();
    Matrix ga = s.grad;
    ga.array().rowwise() *= rv.row(0).array();
    accumulate(s, 0, ga);
    accumulate(s, 1, s.grad.cwiseProduct(av).colwise().sum());
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return make(a.value() * b.value(), {a, b}, [](Node& s) {
    const Matrix& av = s.parents[0]->value();
    const Matrix& bv = s.parents[1]->value();
    if (s.parents[0]->requires_grad) s.parents[0]->grad_buffer().noalias() += s.grad * bv.transpose();
    if (s.parents[1]->requires_grad) s.parents[1]->grad_buffer().noalias() += av.transpose() * s.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  return make(a.value() * b.value().transpose(), {a, b}, [](Node& s) {
    const Matrix& av = s.parents[0]->value();
    const Matrix& bv = s.parents[1]->value();
    if (s.parents[0]->requires_grad) s.parents[0]->grad_buffer().noalias() += s.grad * bv;
    if (s.parents[1]->requires_grad) s.parents[1]->grad_buffer().noalias() += s.grad.transpose() * av;
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a}, [](Node& s) { accumulate(s, 0, s.grad.transpose()); });
}

Var slice_cols(const Var& a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  return make(a.value().middleCols(start, count), {a}, [start, count](Node& s) {
    Node& p = *s.parents[0];
    if (p.requires_grad) p.grad_buffer().middleCols(start, count) += s.grad;
  });
}

Var slice_rows(const Var& a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  return make(a.value().middleRows(start, count), {a}, [start, count](Node& s) {
    Node& p = *s.parents[0];
    if (p.requires_grad) p.grad_buffer().middleRows(start, count) += s.grad;
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  long rows = 0;
  const long cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  long r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make(std::move(out), parts, [](Node& s) {
    long r0 = 0;
    for (std::size_t i = 0; i < s.parents.size(); ++i) {
      const long n = s.parents[i]->value().rows();
      accumulate(s, i, s.grad.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  long cols = 0;
  const long rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  long c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make(std::move(out), parts, [](Node& s) {
    long c0 = 0;
    for (std::size_t i = 0; i < s.parents.size(); ++i) {
      const long n = s.parents[i]->value().cols();
      accumulate(s, i, s.grad.middleCols(c0, n));
      c0 += n;
    }
  });
}

Var gather_rows(const Var& a, const std::vector<long>& index) {
  Matrix out(static_cast<long>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<long>(i)) = a.value().row(index[i]);
  }
  return make(std::move(out), {a}, [index](Node& s) {
    Node& p = *s.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += s.grad.row(static_cast<long>(i));
  });
}

namespace {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix reshape_row_major(const Matrix& m, long rows, long cols) {
  RowMajor rm = m;
  return Eigen::Map<const RowMajor>(rm.data(), rows, cols);
}
}  // namespace

Var reshape(const Var& a, long rows, long cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
  const long r0 = a.rows();
  const long c0 = a.cols();
  return make(reshape_row_major(a.value(), rows, cols), {a}, [r0, c0](Node& s) {
    accumulate(s, 0, reshape_row_major(s.grad, r0, c0));
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a}, [](Node& s) {
    const Matrix& av = s.parents[0]->value();
    accumulate(s, 0, Matrix::Constant(av.rows(), av.cols(), s.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var square(const Var& a) {
  return make(a.value().cwiseProduct(a.value()), {a}, [](Node& s) {
    accumulate(s, 0, 2.0 * s.grad.cwiseProduct(s.parents[0]->value()));
  });
}

Var relu(const Var& a) {
  return make(a.value().cwiseMax(0.0), {a}, [](Node& s) {
    const Matrix& x = s.parents[0]->value();
    accumulate(s, 0, (x.array() > 0.0).select(s.grad, 0.0).matrix());
  });
}

Var quick_gelu(const Var& a) {
  const Matrix sig = (1.0 / (1.0 + (-1.702 * a.value().array()).exp())).matrix();
  Matrix out = a.value().cwiseProduct(sig);
  return make(std::move(out), {a}, [sig](Node& s) {
    const auto x = s.parents[0]->value().array();
    const auto sg = sig.array();
    accumulate(s, 0, (s.grad.array() * (sg + 1.702 * x * sg * (1.0 - sg))).matrix());
  });
}

Var softmax_rows(const Var& a, bool causal) {
  const Matrix& x = a.value();
  if (causal && x.rows() != x.cols()) throw ShapeError("causal softmax needs a square score matrix");
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (long i = 0; i < x.rows(); ++i) {
    const long n = causal ? i + 1 : x.cols();
    const double m = x.row(i).head(n).maxCoeff();
    auto e = (x.row(i).head(n).array() - m).exp();
    out.row(i).head(n) = (e / e.sum()).matrix();
  }
  return make(std::move(out), {a}, [](Node& s) {
    const Matrix& y = s.owned;
    Matrix g(y.rows(), y.cols());
    for (long i = 0; i < y.rows(); ++i) {
      const double d = s.grad.row(i).dot(y.row(i));
      g.row(i) = y.row(i).cwiseProduct((s.grad.row(i).array() - d).matrix());
    }
    accumulate(s, 0, g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& xv = x.value();
  const long c = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("layer_norm: affine shape mismatch");
  }
  Matrix xhat(xv.rows(), c);
  Vector inv_std(xv.rows());
  for (long i = 0; i < xv.rows(); ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& s) {
    const RowVector gam = s.parents[1]->value().row(0);
    if (s.parents[0]->requires_grad) {
      Matrix dxhat = s.grad;
      dxhat.array().rowwise() *= gam.array();
      Matrix dx(dxhat.rows(), dxhat.cols());
      for (long i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = ((dxhat.row(i).array() - m1) - xhat.row(i).array() * m2) * inv_std(i);
      }
      s.parents[0]->grad_buffer() += dx;
    }
    accumulate(s, 1, s.grad.cwiseProduct(xhat).colwise().sum());
    accumulate(s, 2, s.grad.colwise().sum());
  });
}

Var l2_normalize_rows(const Var& a) {
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  for (long i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) throw DomainError("l2_normalize_rows: zero-norm row");
  }
  Matrix out = norms.cwiseInverse().asDiagonal() * x;
  return make(std::move(out), {a}, [norms](Node& s) {
    const Matrix& y = s.owned;
    Matrix g(y.rows(), y.cols());
    for (long i = 0; i < y.rows(); ++i) {
      const double d = s.grad.row(i).dot(y.row(i));
      g.row(i) = (s.grad.row(i) - d * y.row(i)) / norms(i);
    }
    accumulate(s, 0, g);
  });
}

Var rowwise_dot(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "rowwise_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make(std::move(out), {a, b}, [](Node& s) {
    const Matrix& av = s.parents[0]->value();
    const Matrix& bv = s.parents[1]->value();
    accumulate(s, 0, s.grad.col(0).asDiagonal() * bv);
    accumulate(s, 1, s.grad.col(0).asDiagonal() * av);
  });
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                     Matrix* running_mean, Matrix* running_var, double momentum) {
  const Matrix& xv = x.value();
  const long n = xv.rows();
  if (n < 2) throw DomainError("batch_norm_train: batch of size 1 has no batch statistics");
  const long c = xv.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ShapeError("batch_norm_train: affine shape mismatch");
  const RowVector mu = xv.colwise().mean();
  const Matrix centered = xv.rowwise() - mu;
  const RowVector var = centered.array().square().colwise().mean().matrix();
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered;
  xhat.array().rowwise() *= inv_std.array();
  if (running_mean && running_var) {
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    *running_mean = (1.0 - momentum) * *running_mean + momentum * mu;
    *running_var = (1.0 - momentum) * *running_var + momentum * unbias * var;
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& s) {
    const RowVector gam = s.parents[1]->value().row(0);
    if (s.parents[0]->requires_grad) {
      Matrix dxhat = s.grad;
      dxhat.array().rowwise() *= gam.array();
      const RowVector m1 = dxhat.colwise().mean();
      const RowVector m2 = dxhat.cwiseProduct(xhat).colwise().mean();
      Matrix dx = dxhat.rowwise() - m1;
      dx -= (xhat.array().rowwise() * m2.array()).matrix();
      dx.array().rowwise() *= inv_std.array();
      s.parents[0]->grad_buffer() += dx;
    }
    accumulate(s, 1, s.grad.cwiseProduct(xhat).colwise().sum());
    accumulate(s, 2, s.grad.colwise().sum());
  });
}

Var cross_entropy_rows(const Var& logits, const std::vector<long>& targets, bool exclude_diagonal) {
  const Matrix& z = logits.value();
  const long n = z.rows();
  if (n == 0) throw ShapeError("cross_entropy_rows: empty batch");
  if (static_cast<long>(targets.size()) != n) throw ShapeError("cross_entropy_rows: target count mismatch");
  if (exclude_diagonal && z.rows() != z.cols()) throw ShapeError("cross_entropy_rows: diagonal exclusion needs square logits");
  Matrix probs = Matrix::Zero(n, z.cols());
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    const long t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= z.cols() || (exclude_diagonal && t == i)) {
      throw DomainError("cross_entropy_rows: invalid target index");
    }
    double m = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < z.cols(); ++j) {
      if (!(exclude_diagonal && j == i)) m = std::max(m, z(i, j));
    }
    double denom = 0.0;
    for (long j = 0; j < z.cols(); ++j) {
      if (exclude_diagonal && j == i) continue;
      probs(i, j) = std::exp(z(i, j) - m);
      denom += probs(i, j);
    }
    probs.row(i) /= denom;
    loss += -(z(i, t) - m - std::log(denom));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  return make(std::move(out), {logits}, [probs, targets](Node& s) {
    const double n = static_cast<double>(probs.rows());
    Matrix g = probs;
    for (long i = 0; i < probs.rows(); ++i) g(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
    accumulate(s, 0, g * (s.grad(0, 0) / n));
  });
}

Var linear(const Var& x, const Var& weight, const Var* bias) {
  Var y = matmul_nt(x, weight);
  return bias ? add_row(y, *bias) : y;
}

}  // namespace ag
}  // namespace flip
