#include "mta/optim.hpp"

#include <cmath>
#include <numbers>

namespace mta {

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
      w[j] -= lr * (update + opt_.weight_decay * w[j]);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double cosine_lr(double base, std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                 double floor_ratio) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return base;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
  return base * (floor_ratio + (1.0 - floor_ratio) * cosine);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      double* g = p.impl()->grad_buffer();
      for (std::size_t j = 0; j < p.numel(); ++j) g[j] *= factor;
    }
  }
  return norm;
}

}  // namespace mta
