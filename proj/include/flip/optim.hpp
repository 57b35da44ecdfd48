#pragma once

// Adam with decoupled (or optionally L2-coupled) weight decay. Moment
// estimates are keyed by parameter name so optimizer state can be saved next
// to model weights and restored into a freshly constructed model.

#include "flip/autograd.hpp"
#include "flip/tensor_io.hpp"

#include <map>
#include <string>
#include <vector>

namespace flip {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = true;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update of every parameter in `params` from its accumulated grad.
  /// Returns the global gradient norm before clipping.
  double step(const std::vector<Parameter*>& params, double lr);

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  /// Tensors "adam.m.<name>" / "adam.v.<name>" plus metadata "adam.t".
  TensorArchive state() const;
  void load_state(const TensorArchive& archive);

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

}  // namespace flip
