#include <functional>

#include "helpers.hpp"

using namespace ddis;
using testing::randn;
using testing::uniform;
using testing::weighted_sum;

TEST_CASE("elementwise and contraction examples") {
  auto s = add(Tensor::from({1, 2}), Tensor::from({3, 4}));
  CHECK(testing::values_of(s) == std::vector<double>{4, 6});

  Tensor x({1, 1, 3, 3}, 1.0), k({1, 1, 3, 3}, 1.0);
  auto c = conv2d(x, k, Tensor(), 1, 0);
  CHECK(c.shape() == Shape{1, 1, 1, 1});
  CHECK(c.item() == 9.0);

  auto p = softmax(Tensor::from({0, 0, 0}));
  for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // broadcasting [2,3] + [3]
  auto b = add(Tensor({2, 3}, 1.0), Tensor::from({1, 2, 3}));
  CHECK(testing::values_of(b) == std::vector<double>{2, 3, 4, 2, 3, 4});
}

TEST_CASE("shape errors name the primitive and both shapes") {
  try {
    add(Tensor({2}), Tensor({3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 1, 3, 3}), Tensor(), 1, 1), ShapeError);
  CHECK_THROWS_AS(reshape(Tensor({2, 3}), {4}), ShapeError);
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from({1, 2, 3});
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  CHECK(testing::values_of(x.grad()) == std::vector<double>{2, 4, 6});

  Tensor y({4}, 1.0);
  y.set_requires_grad(true);
  backward(mean(y));
  CHECK(testing::values_of(y.grad()) == std::vector<double>{0.25, 0.25, 0.25, 0.25});

  // repeated calls accumulate
  backward(mean(y));
  CHECK(testing::values_of(y.grad()) == std::vector<double>{0.5, 0.5, 0.5, 0.5});

  CHECK_THROWS_AS(backward(mul_scalar(y, 2.0)), ShapeError);
  CHECK_THROWS_AS(backward(sum(Tensor({3}, 1.0))), Error);
}

TEST_CASE("finite_difference_check examples") {
  auto fn = [](const Tensor& x) { return sum(exp(x)); };
  CHECK(finite_difference_check(fn, Tensor::from({0, 1}), 1e-5) < 1e-6);
  auto constant = [](const Tensor&) { return Tensor::scalar(3.0); };
  CHECK(finite_difference_check(constant, Tensor::from({0, 1}), 1e-5) == 0.0);
  CHECK_THROWS(finite_difference_check(fn, Tensor::from({0}), 0.0));
  auto nan_fn = [](const Tensor& x) { return sum(log(x)); };
  CHECK_THROWS_AS(finite_difference_check(nan_fn, Tensor::from({-1.0}), 1e-5), NumericError);
}


TEST_CASE("every primitive matches central differences over 50 seeds") {
  for (const auto& p : testing::primitive_probes()) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      auto fn = [&](const Tensor& x) { return weighted_sum(p.op(x, seed), seed); };
      worst = std::max(worst, finite_difference_check(fn, p.input(seed), 1e-5));
    }
    INFO(std::string(p.name) << " worst relative error " << worst);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("replaying a graph reproduces the root bit-exactly") {
  Tensor x = randn({2, 2, 4, 4}, 3);
  x.set_requires_grad(true);
  Tensor y = sum(square(max_pool2d(silu(conv2d(x, randn({2, 2, 3, 3}, 4), Tensor(), 1, 1)), 2)));
  const auto before = testing::values_of(y);
  Graph g(y);
  CHECK(g.size() > 0);
  CHECK(g.replay() == before);
}

TEST_CASE("forward determinism and backward linearity") {
  Tensor x = randn({3, 4}, 11);
  auto f = [](const Tensor& t) { return sum(ddis::exp(mul_scalar(t, 0.5))); };
  auto g = [](const Tensor& t) { return sum(mul(t, t)); };
  CHECK(f(x).item() == f(x).item());

  auto grad_of = [&](const std::function<Tensor(const Tensor&)>& fn) {
    Tensor v = x.detach();
    v.set_requires_grad(true);
    backward(fn(v));
    return v.grad();
  };
  const double a = 1.5, b = -0.25;
  auto combined = grad_of([&](const Tensor& t) { return add(mul_scalar(f(t), a), mul_scalar(g(t), b)); });
  auto gf = grad_of(f), gg = grad_of(g);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(combined[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-13));
}

TEST_CASE("no-grad regions record nothing") {
  Tensor x = randn({3}, 1);
  x.set_requires_grad(true);
  {
    NoGradGuard guard;
    CHECK_FALSE(mul(x, x).requires_grad());
    EnableGradGuard inner;
    CHECK(mul(x, x).requires_grad());
  }
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("f32 mode rounds every primitive output") {
  Tensor x = Tensor::from({1.0 / 3.0});
  PrecisionGuard pg(Precision::f32);
  auto y = mul_scalar(x, 1.0);
  CHECK(y.item() == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}
