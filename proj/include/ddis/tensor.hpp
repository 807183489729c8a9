#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddis {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a computation produces NaN/Inf or otherwise diverges.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Cache-line aligned storage. Eigen peels unaligned heads off vectorized
/// reductions, so without a fixed alignment the summation order (and the last
/// bits of gradients) would depend on where the allocator put the buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;
struct TensorImpl;

using ForwardFn = std::function<void(std::span<const Tensor> inputs, TensorImpl& out)>;
using BackwardFn = std::function<void(std::span<const Tensor> inputs, const TensorImpl& out)>;

/// One recorded primitive: its inputs and the rules to recompute the output
/// value and to push the output gradient back to the inputs.
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  ForwardFn forward;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

/// Dense row-major array of doubles with optional participation in a
/// reverse-mode gradient tape. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, Buffer data);

  static Tensor scalar(double v);
  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  const Buffer& values() const { return impl_->data; }
  double item() const;
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros of the right shape when nothing has been accumulated.
  Tensor grad() const;
  void zero_grad() { impl_->grad.clear(); }

  bool is_leaf() const { return impl_->node == nullptr; }
  const std::shared_ptr<Node>& node() const { return impl_->node; }

  /// Deep copy that is a leaf and does not require grad.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl& impl() { return *impl_; }
  const TensorImpl& impl() const { return *impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_op(std::string op, std::vector<Tensor> inputs, Shape shape, ForwardFn fwd,
                        BackwardFn bwd);
};

/// Builds the result of a primitive: runs `fwd` once and, when gradients are
/// enabled and some input requires them, records the node for backward().
Tensor make_op(std::string op, std::vector<Tensor> inputs, Shape shape, ForwardFn fwd, BackwardFn bwd);

/// Accumulation buffer of an input inside a BackwardFn (allocated on demand).
Buffer& grad_buffer(const Tensor& t);

/// Reverse pass from a scalar root. Leaf gradients accumulate across calls.
void backward(const Tensor& root);

/// Disables tape recording for its lifetime (thread-local).
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

/// Re-enables tape recording inside a no-grad region (for inner gradient computations).
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

enum class Precision { f64, f32 };

/// f32 rounds every primitive's output to single precision (emulated 32-bit
/// arithmetic). Thread-local, default f64.
void set_precision(Precision p);
Precision precision();

class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p) : previous_(precision()) { set_precision(p); }
  ~PrecisionGuard() { set_precision(previous_); }
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision previous_;
};

/// Topologically ordered view of the nodes that produced a root.
class Graph {
 public:
  explicit Graph(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  std::vector<std::string> ops() const;
  /// Re-runs every recorded forward rule in order; returns the recomputed root value.
  std::vector<double> replay();

 private:
  Tensor root_;
  std::vector<Tensor> order_;  // non-leaf tensors, inputs before outputs
};

/// max |analytic - central difference| / (max |central difference| + 1e-12), over coordinates.
/// `fn` must be pure; `at` is not modified.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& at,
                               double step);

}  // namespace ddis
