#include "flip/optim.hpp"

#include "flip/errors.hpp"

#include <cmath>

namespace flip {

double Adam::step(const std::vector<Parameter*>& params, double lr) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (p->grad.size() == p->value.size()) sq += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : params) {
    Matrix g = p->grad.size() == p->value.size() ? Matrix(p->grad * clip)
                                                 : Matrix::Zero(p->value.rows(), p->value.cols());
    if (!cfg_.decoupled && cfg_.weight_decay != 0) g += cfg_.weight_decay * p->value;
    auto [mit, m_new] = m_.try_emplace(p->name, Matrix::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = v_.try_emplace(p->name, Matrix::Zero(g.rows(), g.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    if (m.rows() != g.rows() || m.cols() != g.cols()) throw ShapeError("adam: moment shape changed for " + p->name);
    m = cfg_.beta1 * m + (1 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1 - cfg_.beta2) * g.cwiseProduct(g);
    if (lr == 0.0) continue;
    if (cfg_.decoupled && cfg_.weight_decay != 0) p->value -= (lr * cfg_.weight_decay) * p->value;
    p->value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
  return norm;
}

TensorArchive Adam::state() const {
  TensorArchive out;
  for (const auto& [name, m] : m_) out.tensors["adam.m." + name] = NamedTensor{{m.rows(), m.cols()}, m};
  for (const auto& [name, v] : v_) out.tensors["adam.v." + name] = NamedTensor{{v.rows(), v.cols()}, v};
  out.metadata["adam.t"] = std::to_string(t_);
  return out;
}

void Adam::load_state(const TensorArchive& archive) {
  m_.clear();
  v_.clear();
  for (const auto& [key, t] : archive.tensors) {
    if (key.rfind("adam.m.", 0) == 0) {
      m_[key.substr(7)] = t.value;
    } else if (key.rfind("adam.v.", 0) == 0) {
      v_[key.substr(7)] = t.value;
    }
  }
  const auto it = archive.metadata.find("adam.t");
  if (it == archive.metadata.end()) throw IoError("optimizer state lacks a step count");
  t_ = std::stol(it->second);
}

}  // namespace flip
