#pragma once

#include <functional>
#include <vector>

#include "ddis/classifier.hpp"
#include "ddis/ops.hpp"
#include "ddis/random.hpp"

// Shared by the unit tests and the acceptance harness.
namespace testing {

using namespace ddis;

inline Tensor randn(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return rng.normal_tensor(shape, scale);
}

inline Tensor uniform(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Scalar probe: sum(op(x) * w) with a fixed random weight so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) { return sum(mul(y, randn(y.shape(), seed ^ 0xABCD))); }

/// Small classifier whose running statistics come from one training batch.
inline ClassifierModel tiny_classifier(std::uint64_t seed, std::int64_t size = 4, std::vector<std::int64_t> widths = {3, 4},
                                       std::int64_t classes = 3) {
  ClassifierConfig c;
  c.image_size = size;
  c.widths = std::move(widths);
  c.num_classes = classes;
  c.momentum = 1.0;
  ClassifierModel m(c, seed);
  m.train_forward(uniform({8, 1, size, size}, seed + 1, -1.0, 1.0));
  return m;
}

struct Probe {
  const char* name;
  std::function<Tensor(std::uint64_t)> input;
  std::function<Tensor(const Tensor&, std::uint64_t)> op;
};


// Inputs are kept away from kinks (relu at 0, max-pool ties) so central differences are meaningful.
inline std::vector<Probe> primitive_probes() {
  auto away_from_zero = [](std::uint64_t s) {
    Tensor t = randn({3, 4}, s);
    for (auto& v : t.data()) v += v >= 0 ? 0.1 : -0.1;
    return t;
  };
  auto positive = [](std::uint64_t s) { return uniform({3, 4}, s, 0.5, 2.0); };
  auto plain = [](std::uint64_t s) { return randn({3, 4}, s); };
  auto image = [](std::uint64_t s) { return randn({2, 2, 4, 4}, s); };
  return {
      {"add", plain, [](const Tensor& x, std::uint64_t s) { return add(x, randn({4}, s + 7)); }},
      {"sub", plain, [](const Tensor& x, std::uint64_t s) { return sub(randn({3, 1}, s + 7), x); }},
      {"mul", plain, [](const Tensor& x, std::uint64_t s) { return mul(x, add(x, randn({3, 4}, s + 7))); }},
      {"div", positive, [](const Tensor& x, std::uint64_t s) { return div(randn({3, 4}, s + 7), x); }},
      {"add_scalar", plain, [](const Tensor& x, std::uint64_t) { return add_scalar(x, 0.3); }},
      {"mul_scalar", plain, [](const Tensor& x, std::uint64_t) { return mul_scalar(x, -1.7); }},
      {"neg", plain, [](const Tensor& x, std::uint64_t) { return neg(x); }},
      {"relu", away_from_zero, [](const Tensor& x, std::uint64_t) { return relu(x); }},
      {"silu", plain, [](const Tensor& x, std::uint64_t) { return silu(x); }},
      {"tanh", plain, [](const Tensor& x, std::uint64_t) { return ddis::tanh(x); }},
      {"sigmoid", plain, [](const Tensor& x, std::uint64_t) { return sigmoid(x); }},
      {"exp", plain, [](const Tensor& x, std::uint64_t) { return ddis::exp(x); }},
      {"log", positive, [](const Tensor& x, std::uint64_t) { return ddis::log(x); }},
      {"sqrt", positive, [](const Tensor& x, std::uint64_t) { return ddis::sqrt(x); }},
      {"square", plain, [](const Tensor& x, std::uint64_t) { return square(x); }},
      {"smooth_clamp", plain, [](const Tensor& x, std::uint64_t) { return smooth_clamp(mul_scalar(x, 1.5), 0.9); }},
      {"matmul", plain, [](const Tensor& x, std::uint64_t s) { return matmul(x, randn({4, 5}, s + 7)); }},
      {"matmul_batched",
       [](std::uint64_t s) { return randn({2, 3, 4}, s); },
       [](const Tensor& x, std::uint64_t s) { return matmul(x, randn({2, 4, 2}, s + 7)); }},
      {"matmul_shared",
       [](std::uint64_t s) { return randn({2, 3, 4}, s); },
       [](const Tensor& x, std::uint64_t s) { return matmul(randn({2, 2, 3}, s + 7), x); }},
      {"transpose", plain, [](const Tensor& x, std::uint64_t) { return transpose(x); }},
      {"permute", image, [](const Tensor& x, std::uint64_t) { return permute(x, {0, 2, 3, 1}); }},
      {"reshape", plain, [](const Tensor& x, std::uint64_t) { return reshape(x, {2, 6}); }},
      {"concat", plain, [](const Tensor& x, std::uint64_t s) { return concat({x, randn({3, 2}, s + 7), x}, 1); }},
      {"slice", plain, [](const Tensor& x, std::uint64_t) { return slice(x, 1, 1, 2); }},
      {"gather_rows", plain, [](const Tensor& x, std::uint64_t) { return gather_rows(x, {2, 0, 2}); }},
      {"pick", plain, [](const Tensor& x, std::uint64_t) { return pick(x, {3, 0, 1}); }},
      {"sum", plain, [](const Tensor& x, std::uint64_t) { return sum(x); }},
      {"mean", plain, [](const Tensor& x, std::uint64_t) { return mean(x); }},
      {"sum_axes", image, [](const Tensor& x, std::uint64_t) { return sum_axes(x, {0, 2}, false); }},
      {"mean_axes", image, [](const Tensor& x, std::uint64_t) { return mean_axes(x, {0, 2, 3}, true); }},
      {"var_axes", image, [](const Tensor& x, std::uint64_t) { return var_axes(x, {0, 2, 3}, false); }},
      {"l2_norm", plain, [](const Tensor& x, std::uint64_t) { return l2_norm(x); }},
      {"softmax", plain, [](const Tensor& x, std::uint64_t) { return softmax(x); }},
      {"log_softmax", plain, [](const Tensor& x, std::uint64_t) { return log_softmax(x); }},
      {"conv2d", image, [](const Tensor& x, std::uint64_t s) { return conv2d(x, randn({3, 2, 3, 3}, s + 7), randn({3}, s + 8), 1, 1); }},
      {"conv2d_stride", image, [](const Tensor& x, std::uint64_t s) { return conv2d(x, randn({3, 2, 3, 3}, s + 7), Tensor(), 2, 1); }},
      {"conv2d_weight", [](std::uint64_t s) { return randn({3, 2, 3, 3}, s); },
       [](const Tensor& w, std::uint64_t s) { return conv2d(randn({2, 2, 4, 4}, s + 7), w, Tensor(), 1, 1); }},
      {"conv_transpose2d", image,
       [](const Tensor& x, std::uint64_t s) { return conv_transpose2d(x, randn({2, 3, 4, 4}, s + 7), randn({3}, s + 8), 2, 1); }},
      {"conv_transpose2d_weight", [](std::uint64_t s) { return randn({2, 3, 4, 4}, s); },
       [](const Tensor& w, std::uint64_t s) { return conv_transpose2d(randn({1, 2, 3, 3}, s + 7), w, Tensor(), 2, 1); }},
      {"avg_pool2d", image, [](const Tensor& x, std::uint64_t) { return avg_pool2d(x, 2); }},
      {"max_pool2d", image, [](const Tensor& x, std::uint64_t) { return max_pool2d(x, 2); }},
      {"upsample_nearest2d", image, [](const Tensor& x, std::uint64_t) { return upsample_nearest2d(x, 2); }},
      {"linear", plain, [](const Tensor& x, std::uint64_t s) { return linear(x, randn({2, 4}, s + 7), randn({2}, s + 8)); }},
      {"linear_weight", [](std::uint64_t s) { return randn({2, 4}, s); },
       [](const Tensor& w, std::uint64_t s) { return linear(randn({3, 4}, s + 7), w, Tensor({2}, 0.0)); }},
  };
}


}  // namespace testing
