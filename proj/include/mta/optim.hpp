#pragma once

#include <vector>

#include "mta/tensor.hpp"

namespace mta {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Adam over a fixed parameter group. Parameters without a gradient this step
// are left untouched, moments included.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup then cosine decay from `base` to `base * floor_ratio`.
double cosine_lr(double base, std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                 double floor_ratio = 0.0);

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace mta
