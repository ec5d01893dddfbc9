#pragma once

#include <functional>
#include <vector>

#include "mta/tensor.hpp"

namespace mta {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares tape gradients of `f` with respect to each tensor in `params`
// against central differences. `f` must read the params it is given; they are
// perturbed in place and restored. Error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps);

// Single-input form: evaluates f(x) on a grad-enabled copy of x.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace mta
