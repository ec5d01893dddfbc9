#pragma once

// Dense f64 tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage, like the
// handles of most tensor libraries. Every primitive below records a backward
// closure on the calling thread's active Tape when any input requires grad.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mta {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

std::string to_string(const Shape& shape);
std::size_t numel_of(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  bool is_leaf = true;

  void accumulate_grad(std::size_t i, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += g;
  }
  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct writes bypass the tape; reserved for optimizers and initializers.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Value copy that does not participate in gradients.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape, std::vector<double>, bool);
  std::shared_ptr<TensorImpl> impl_;
};

// Record of executed operations for one thread. Backward replays the records
// in exact reverse order and may run only once per reset.
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { records_.push_back(std::move(fn)); }
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  // The tape primitives record onto for the calling thread.
  static Tape& active();
  // True when recording is suspended on this thread (see NoGradScope).
  static bool recording_enabled();

 private:
  friend class TapeScope;
  friend class NoGradScope;
  std::vector<Backward> records_;
  bool consumed_ = false;
};

// Installs `tape` as the active tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

// Runs backward on the active tape.
void backward(const Tensor& loss);

// Boolean mask with the same numel as the tensor it applies to; nonzero = set.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(Shape s, std::vector<std::uint8_t> b);
  static Mask filled(Shape s, bool value);
  bool operator[](std::size_t i) const { return bits[i] != 0; }
};

// ---- primitives -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation

// Rank-2 x rank-2, rank-3 x rank-2 (shared right operand) or rank-3 x rank-3
// (batched). Inner sums run over k in ascending order.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);  // swaps the last two axes

Tensor sum(const Tensor& x);  // all elements -> scalar
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

// Softmax along the last axis. Entries with excluded[i] set get probability 0;
// a row with every entry excluded is rejected.
Tensor softmax(const Tensor& x);
Tensor softmax(const Tensor& x, const Mask& excluded);
Tensor log_softmax(const Tensor& x);

Tensor masked_fill(const Tensor& x, const Mask& mask, double value);

Tensor l2_norm(const Tensor& x, bool keepdim = false);   // along last axis
Tensor std_dev(const Tensor& x, bool keepdim = false);   // population, last axis

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

// table [V, d]; ids shaped `index_shape` -> index_shape + [d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean next-token cross-entropy over rows with weight != 0. logits [..., V];
// targets and weights have one entry per row.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const double> weights);

// Cosine similarity along the last axis (composite).
Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool keepdim = false);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace mta
