#include "ddis/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ddis {

namespace {
thread_local bool g_grad_enabled = true;
thread_local Precision g_precision = Precision::f64;

void round_to_f32(Buffer& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}
}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(static_cast<std::size_t>(numel(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Buffer data) : impl_(std::make_shared<TensorImpl>()) {
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{static_cast<std::int64_t>(values.size())}, std::vector<double>(values));
}

double Tensor::item() const {
  if (impl_->data.size() != 1)
    throw ShapeError("item() on tensor of shape " + to_string(impl_->shape));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf() && !on) throw Error("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (impl_->grad.empty()) return Tensor(impl_->shape, 0.0);
  return Tensor(impl_->shape, impl_->grad);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor make_op(std::string op, std::vector<Tensor> inputs, Shape shape, ForwardFn fwd, BackwardFn bwd) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(numel(shape)), 0.0);
  impl->shape = std::move(shape);
  fwd(inputs, *impl);
  if (g_precision == Precision::f32) round_to_f32(impl->data);

  bool track = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->forward = std::move(fwd);
    node->backward = std::move(bwd);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

Buffer& grad_buffer(const Tensor& t) {
  auto& impl = const_cast<TensorImpl&>(t.impl());
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

namespace {

// Non-leaf tensors reachable from root, inputs before outputs.
std::vector<Tensor> topological_order(const Tensor& root) {
  std::vector<Tensor> order;
  std::unordered_set<const TensorImpl*> visited;
  struct Frame {
    Tensor t;
    std::size_t next;
  };
  std::vector<Frame> stack;
  if (root.is_leaf()) return order;
  stack.push_back({root, 0});
  visited.insert(&root.impl());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& inputs = top.t.node()->inputs;
    if (top.next < inputs.size()) {
      const Tensor& in = inputs[top.next++];
      if (!in.is_leaf() && in.requires_grad() && visited.insert(&in.impl()).second)
        stack.push_back({in, 0});
    } else {
      order.push_back(top.t);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void backward(const Tensor& root) {
  if (root.size() != 1)
    throw ShapeError("backward() needs a scalar root, got shape " + to_string(root.shape()));
  if (!root.requires_grad()) throw Error("backward() on a root that is detached from any graph");

  if (root.is_leaf()) {
    grad_buffer(root)[0] += 1.0;
    return;
  }
  auto order = topological_order(root);
  for (auto& t : order) t.impl().grad.clear();
  grad_buffer(root)[0] = 1.0;
  NoGradGuard guard;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& impl = it->impl();
    if (impl.grad.empty()) continue;
    impl.node->backward(impl.node->inputs, impl);
  }
  for (auto& t : order) {
    t.impl().grad.clear();
    t.impl().grad.shrink_to_fit();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

Graph::Graph(const Tensor& root) : root_(root), order_(topological_order(root)) {}

std::vector<std::string> Graph::ops() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const auto& t : order_) names.push_back(t.node()->op);
  return names;
}

std::vector<double> Graph::replay() {
  for (auto& t : order_) {
    auto& impl = t.impl();
    impl.node->forward(impl.node->inputs, impl);
    if (g_precision == Precision::f32) round_to_f32(impl.data);
  }
  return {root_.values().begin(), root_.values().end()};
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& at,
                               double step) {
  if (!(step > 0.0)) throw Error("finite_difference_check: step must be positive");
  Tensor x = at.detach();
  x.set_requires_grad(true);
  Tensor y = fn(x);
  if (y.size() != 1) throw ShapeError("finite_difference_check: fn must return a scalar");
  std::vector<double> analytic(static_cast<std::size_t>(x.size()), 0.0);
  if (y.requires_grad()) {
    backward(y);
    const Tensor g = x.grad();
    analytic.assign(g.values().begin(), g.values().end());
  }

  // Normwise: per-coordinate ratios blow up where a saturated op has a gradient near zero.
  double diff = 0.0, scale = 0.0;
  NoGradGuard guard;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor probe = at.detach();
    const double x0 = probe[i];
    probe.data()[i] = x0 + step;
    const double up = fn(probe).item();
    probe.data()[i] = x0 - step;
    const double down = fn(probe).item();
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[static_cast<std::size_t>(i)];
    if (std::isnan(numeric) || std::isnan(a))
      throw NumericError("finite_difference_check: NaN gradient at coordinate " + std::to_string(i));
    diff = std::max(diff, std::abs(a - numeric));
    scale = std::max(scale, std::abs(numeric));
  }
  return diff / (scale + 1e-12);
}

}  // namespace ddis
