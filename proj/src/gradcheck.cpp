#include "mta/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mta {

namespace {

double eval_value(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const Tensor out = f();
  if (out.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar, got " + to_string(out.shape()));
  const double v = out.item();
  if (!std::isfinite(v)) throw Error("finite_diff_check: f returned a non-finite value");
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw Error("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  std::vector<bool> restore(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    restore[p] = params[p].requires_grad();
    params[p].set_requires_grad(true);
    params[p].zero_grad();
  }

  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor out = f();
    if (out.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar, got " + to_string(out.shape()));
    if (!std::isfinite(out.item())) throw Error("finite_diff_check: f returned a non-finite value");
    if (out.requires_grad()) tape.backward(out);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto g = params[p].grad();
      analytic[p] = g.empty() ? std::vector<double>(params[p].numel(), 0.0) : std::vector<double>(g.begin(), g.end());
    }
  }

  GradCheckResult result;
  bool seen = false;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = eval_value(f);
      data[i] = saved - eps;
      const double down = eval_value(f);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (!seen || err > result.max_rel_error) {
        seen = true;
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
        result.analytic = analytic[p][i];
        result.numeric = numeric;
      }
    }
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    params[p].zero_grad();
    params[p].set_requires_grad(restore[p]);
  }
  return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone(true);
  return finite_diff_check([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

}  // namespace mta
