#include "mta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mta {

namespace {

thread_local Tape default_tape;
thread_local Tape* active_tape = nullptr;
thread_local bool recording = true;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// [outer, n, inner] view of `shape` around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
  return x.shape().back();
}

Shape drop_last(const Shape& s, bool keepdim) {
  Shape out(s.begin(), s.end() - 1);
  if (keepdim) out.push_back(1);
  return out;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->data.assign(1, 0.0); }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (numel_of(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw Error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = on;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone(bool requires_grad) const { return Tensor(impl_->shape, impl_->data, requires_grad); }

Tensor make_result(Shape shape, std::vector<double> data, bool tracked) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = tracked;
  impl->is_leaf = !tracked;
  return Tensor(std::move(impl));
}

// ---- Tape -----------------------------------------------------------------

Tape& Tape::active() { return active_tape ? *active_tape : default_tape; }

bool Tape::recording_enabled() { return recording; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward called twice on the same tape without reset");
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (records_.empty()) throw Error("backward on an empty tape");
  if (!loss.requires_grad()) throw Error("loss does not depend on any tensor that requires grad");
  loss.impl()->accumulate_grad(0, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  consumed_ = true;
  records_.clear();
}

void Tape::reset() {
  records_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }
TapeScope::~TapeScope() { active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(recording) { recording = false; }
NoGradScope::~NoGradScope() { recording = previous_; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

Mask::Mask(Shape s, std::vector<std::uint8_t> b) : shape(std::move(s)), bits(std::move(b)) {
  if (numel_of(shape) != bits.size()) throw ShapeError("mask length does not match shape " + to_string(shape));
}

Mask Mask::filled(Shape s, bool value) {
  const std::size_t n = numel_of(s);
  return Mask(std::move(s), std::vector<std::uint8_t>(n, value ? 1 : 0));
}

// ---- shape ops ------------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const std::size_t rank = shape.size();
  const std::size_t offset = rank - x.rank();
  // Input strides aligned to the output rank; broadcast axes get stride 0.
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t d = x.shape()[i - offset];
    in_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  const std::size_t n = numel_of(shape);
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    source[o] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += in_stride[ax];
      if (idx[ax] < shape[ax]) break;
      src -= in_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[source[o]];
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(shape, std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), source = std::move(source)] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t o = 0; o < source.size(); ++o) g[source[o]] += ri->grad[o];
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl()] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t i = 0; i < ri->grad.size(); ++i) g[i] += ri->grad[i];
    });
  }
  return result;
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a0, const Tensor& b0, Fwd fwd, Bwd bwd) {
  Tensor a = a0, b = b0;
  if (a0.shape() != b0.shape()) {
    Shape target;
    try {
      target = broadcast_shape(a0.shape(), b0.shape());
    } catch (const ShapeError&) {
      throw ShapeError(std::string(name) + ": shape mismatch " + to_string(a0.shape()) + " vs " +
                       to_string(b0.shape()));
    }
    a = broadcast_to(a0, target);
    b = broadcast_to(b0, target);
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
  const bool tracked = wants_grad({&a, &b});
  Tensor result = make_result(a.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([ai = a.impl(), bi = b.impl(), ri = result.impl(), bwd] {
      if (ri->grad.empty()) return;
      const std::size_t n = ri->data.size();
      double* ga = ai->requires_grad ? ai->grad_buffer() : nullptr;
      double* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        double da = 0.0, db = 0.0;
        bwd(ai->data[i], bi->data[i], ri->data[i], ri->grad[i], da, db);
        if (ga) ga[i] += da;
        if (gb) gb[i] += db;
      }
    });
  }
  return result;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), bwd] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t i = 0; i < ri->data.size(); ++i) g[i] += bwd(xi->data[i], ri->data[i]) * ri->grad[i];
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out, double g, double& da, double& db) {
        da = g / y;
        db = -g * out / y;
      });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); }, [](double, double out) { return 0.5 / out; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary_op(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

// ---- matmul / transpose ---------------------------------------------------

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// ga[m,k] += g[m,n] * b[k,n]^T
void grad_left(const double* g, const double* b, double* ga, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_acc(g, bt.data(), ga, m, n, k);
}

// gb[k,n] += a[m,k]^T * g[m,n]
void grad_right(const double* a, const double* g, double* gb, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* gbp = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) gbp[j] += av * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto mismatch = [&] {
    return ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  };
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool batched_b = false;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw mismatch();
    out_shape = {m, n};
  } else if (a.rank() == 3 && b.rank() == 2) {
    // Shared right operand: fold the batch into rows.
    m = a.dim(0) * a.dim(1), k = a.dim(2), n = b.dim(1);
    if (b.dim(0) != k) throw mismatch();
    out_shape = {a.dim(0), a.dim(1), n};
  } else if (a.rank() == 3 && b.rank() == 3) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) throw mismatch();
    batched_b = true;
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }
  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_acc(ad + s * m * k, bd + (batched_b ? s * k * n : 0), out.data() + s * m * n, m, k, n);
  }
  const bool tracked = wants_grad({&a, &b});
  Tensor result = make_result(std::move(out_shape), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([ai = a.impl(), bi = b.impl(), ri = result.impl(), batch, m, k, n, batched_b] {
      if (ri->grad.empty()) return;
      const double* g = ri->grad.data();
      double* ga = ai->requires_grad ? ai->grad_buffer() : nullptr;
      double* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
      for (std::size_t s = 0; s < batch; ++s) {
        const double* gs = g + s * m * n;
        const double* as = ai->data.data() + s * m * k;
        const std::size_t boff = batched_b ? s * k * n : 0;
        if (ga) grad_left(gs, bi->data.data() + boff, ga + s * m * k, m, k, n);
        if (gb) grad_right(as, gs, gb + boff, m, k, n);
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t r = x.rank();
  const std::size_t rows = x.dim(r - 2), cols = x.dim(r - 1);
  const std::size_t batch = x.numel() / (rows * cols);
  Shape shape = x.shape();
  std::swap(shape[r - 2], shape[r - 1]);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t off = s * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[off + j * rows + i] = xd[off + i * cols + j];
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(std::move(shape), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), batch, rows, cols] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t s = 0; s < batch; ++s) {
        const std::size_t off = s * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) g[off + i * cols + j] += ri->grad[off + j * rows + i];
      }
    });
  }
  return result;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool tracked = wants_grad({&x});
  Tensor result = make_result({}, {s}, tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl()] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += ri->grad[0];
    });
  }
  return result;
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), ax);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.n + j) * sp.inner + i];
  Shape shape = x.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(std::move(shape), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), sp] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.n; ++j)
          for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.n + j) * sp.inner + i] += ri->grad[o * sp.inner + i];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  const Tensor s = sum(x);
  return scale(s, 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const Tensor s = sum(x, axis, keepdim);
  return scale(s, 1.0 / static_cast<double>(x.dim(ax)));
}

// ---- softmax family -------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& x, const Mask* excluded) {
  const std::size_t n = last_dim(x, "softmax");
  const std::size_t rows = x.numel() / n;
  if (excluded && excluded->bits.size() != x.numel()) {
    throw ShapeError("softmax: mask shape " + to_string(excluded->shape) + " vs input " + to_string(x.shape()));
  }
  std::vector<double> out(x.numel(), 0.0);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * n;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (excluded && (*excluded)[off + j]) continue;
      mx = std::max(mx, xd[off + j]);
      any = true;
    }
    if (!any) throw Error("softmax: row " + std::to_string(r) + " has every entry masked");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (excluded && (*excluded)[off + j]) continue;
      out[off + j] = std::exp(xd[off + j] - mx);
      s += out[off + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[off + j] /= s;
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), rows, n] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      const double* y = ri->data.data();
      const double* gy = ri->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[off + j] * y[off + j];
        for (std::size_t j = 0; j < n; ++j) g[off + j] += y[off + j] * (gy[off + j] - dot);
      }
    });
  }
  return result;
}

}  // namespace

Tensor softmax(const Tensor& x) { return softmax_impl(x, nullptr); }

Tensor softmax(const Tensor& x, const Mask& excluded) { return softmax_impl(x, &excluded); }

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax");
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * n;
    double mx = xd[off];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xd[off + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xd[off + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[off + j] = xd[off + j] - lse;
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), rows, n] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      const double* y = ri->data.data();
      const double* gy = ri->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * n;
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += gy[off + j];
        for (std::size_t j = 0; j < n; ++j) g[off + j] += gy[off + j] - std::exp(y[off + j]) * gs;
      }
    });
  }
  return result;
}

Tensor masked_fill(const Tensor& x, const Mask& mask, double value) {
  if (mask.bits.size() != x.numel()) {
    throw ShapeError("masked_fill: mask shape " + to_string(mask.shape) + " vs input " + to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), bits = mask.bits] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t i = 0; i < bits.size(); ++i)
        if (!bits[i]) g[i] += ri->grad[i];
    });
  }
  return result;
}

// ---- norms ----------------------------------------------------------------

Tensor l2_norm(const Tensor& x, bool keepdim) {
  const std::size_t n = last_dim(x, "l2_norm");
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xd[r * n + j] * xd[r * n + j];
    out[r] = std::sqrt(s);
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(drop_last(x.shape(), keepdim), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), rows, n] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = ri->data[r];
        if (norm == 0.0) continue;
        const double f = ri->grad[r] / norm;
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += f * xi->data[r * n + j];
      }
    });
  }
  return result;
}

Tensor std_dev(const Tensor& x, bool keepdim) {
  const std::size_t n = last_dim(x, "std_dev");
  const std::size_t rows = x.numel() / n;
  const double dn = static_cast<double>(n);
  std::vector<double> out(rows), means(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xd[r * n + j];
    const double mu = s / dn;
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (xd[r * n + j] - mu) * (xd[r * n + j] - mu);
    means[r] = mu;
    out[r] = std::sqrt(v / dn);
  }
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(drop_last(x.shape(), keepdim), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), means = std::move(means), rows, n, dn] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double sigma = ri->data[r];
        if (sigma == 0.0) continue;
        const double f = ri->grad[r] / (dn * sigma);
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += f * (xi->data[r * n + j] - means[r]);
      }
    });
  }
  return result;
}

// ---- concat / slice -------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape reference = parts[0].shape();
  reference[ax] = 0;
  Shape shape = reference;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() == reference.size()) probe[ax] = 0;
    if (probe != reference) {
      throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    shape[ax] += p.dim(ax);
  }
  const AxisSplit total = split_at(shape, ax);
  std::vector<double> out(numel_of(shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  bool tracked = false;
  for (const Tensor& p : parts) {
    offsets.push_back(at);
    const std::size_t len = p.dim(ax);
    const auto pd = p.data();
    for (std::size_t o = 0; o < total.outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t i = 0; i < total.inner; ++i)
          out[(o * total.n + at + j) * total.inner + i] = pd[(o * len + j) * total.inner + i];
    at += len;
    tracked = tracked || (Tape::recording_enabled() && p.requires_grad());
  }
  Tensor result = make_result(std::move(shape), std::move(out), tracked);
  if (tracked) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    Tape::active().record([impls = std::move(impls), offsets = std::move(offsets), ri = result.impl(), total, ax] {
      if (ri->grad.empty()) return;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        auto& pi = impls[k];
        if (!pi->requires_grad) continue;
        const std::size_t len = pi->shape[ax];
        double* g = pi->grad_buffer();
        for (std::size_t o = 0; o < total.outer; ++o)
          for (std::size_t j = 0; j < len; ++j)
            for (std::size_t i = 0; i < total.inner; ++i)
              g[(o * len + j) * total.inner + i] += ri->grad[(o * total.n + offsets[k] + j) * total.inner + i];
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (start + length > x.dim(ax)) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of size " + std::to_string(x.dim(ax)));
  }
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < length; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * length + j) * sp.inner + i] = xd[(o * sp.n + start + j) * sp.inner + i];
  const bool tracked = wants_grad({&x});
  Tensor result = make_result(std::move(shape), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), ri = result.impl(), sp, start, length] {
      if (ri->grad.empty() || !xi->requires_grad) return;
      double* g = xi->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < length; ++j)
          for (std::size_t i = 0; i < sp.inner; ++i)
            g[(o * sp.n + start + j) * sp.inner + i] += ri->grad[(o * length + j) * sp.inner + i];
    });
  }
  return result;
}

// ---- embedding / layer norm / cross-entropy -------------------------------

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
  if (numel_of(index_shape) != ids.size()) throw ShapeError("embedding: ids do not match " + to_string(index_shape));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw Error("embedding: id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Shape shape = index_shape;
  shape.push_back(d);
  const bool tracked = wants_grad({&table});
  Tensor result = make_result(std::move(shape), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([ti = table.impl(), ri = result.impl(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
      if (ri->grad.empty() || !ti->requires_grad) return;
      double* g = ti->grad_buffer();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[r]) * d + j] += ri->grad[r * d + j];
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw ShapeError("layer_norm: shape mismatch " + to_string(x.shape()) + " vs gain " + to_string(gain.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const double dn = static_cast<double>(n);
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xd[off + j];
    const double mu = s / dn;
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (xd[off + j] - mu) * (xd[off + j] - mu);
    inv_std[r] = 1.0 / std::sqrt(v / dn + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[off + j] = (xd[off + j] - mu) * inv_std[r];
      out[off + j] = xhat[off + j] * gd[j] + bd[j];
    }
  }
  const bool tracked = wants_grad({&x, &gain, &bias});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    Tape::active().record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), ri = result.impl(),
                           xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n, dn] {
      if (ri->grad.empty()) return;
      const double* gy = ri->grad.data();
      double* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
      double* gg = gi->requires_grad ? gi->grad_buffer() : nullptr;
      double* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * n;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dxh = gy[off + j] * gi->data[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat[off + j];
          if (gg) gg[j] += gy[off + j] * xhat[off + j];
          if (gb) gb[j] += gy[off + j];
        }
        if (!gx) continue;
        for (std::size_t j = 0; j < n; ++j) {
          const double dxh = gy[off + j] * gi->data[j];
          gx[off + j] += inv_std[r] / dn * (dn * dxh - sum_dxhat - xhat[off + j] * sum_dxhat_xhat);
        }
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const double> weights) {
  const std::size_t v = last_dim(logits, "cross_entropy");
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows || weights.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows but " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(weights.size()) + " weights");
  }
  double total_w = 0.0;
  for (double w : weights) total_w += w;
  if (total_w <= 0.0) throw Error("cross_entropy: no position carries weight");
  const auto xd = logits.data();
  std::vector<double> lse(rows, 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == 0.0) continue;
    const std::size_t off = r * v;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw Error("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    double mx = xd[off];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, xd[off + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(xd[off + j] - mx);
    lse[r] = mx + std::log(s);
    loss += weights[r] * (lse[r] - xd[off + static_cast<std::size_t>(targets[r])]);
  }
  loss /= total_w;
  const bool tracked = wants_grad({&logits});
  Tensor result = make_result({}, {loss}, tracked);
  if (tracked) {
    Tape::active().record([li = logits.impl(), ri = result.impl(), lse = std::move(lse),
                           t = std::vector<std::int32_t>(targets.begin(), targets.end()),
                           w = std::vector<double>(weights.begin(), weights.end()), rows, v, total_w] {
      if (ri->grad.empty() || !li->requires_grad) return;
      double* g = li->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if (w[r] == 0.0) continue;
        const std::size_t off = r * v;
        const double f = ri->grad[0] * w[r] / total_w;
        for (std::size_t j = 0; j < v; ++j) g[off + j] += f * std::exp(li->data[off + j] - lse[r]);
        g[off + static_cast<std::size_t>(t[r])] -= f;
      }
    });
  }
  return result;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool keepdim) {
  require_same_shape("cosine_similarity", a, b);
  const Tensor dot = sum(mul(a, b), -1, keepdim);
  return div(dot, mul(l2_norm(a, keepdim), l2_norm(b, keepdim)));
}

}  // namespace mta
