#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/diffusion.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
using testing::randn;

TEST_CASE("schedule tables") {
  auto s = make_schedule();
  CHECK(s.alpha_bar[0] == 1.0);
  for (int t = 1; t < s.train_steps; ++t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  CHECK(s.alpha_bar[999] < 1e-4);
  CHECK(s.steps() == 30);
  CHECK(s.timesteps.front() == 0);
  CHECK(s.timesteps.back() == 999);
  for (std::size_t i = 1; i < s.timesteps.size(); ++i) CHECK(s.timesteps[i] > s.timesteps[i - 1]);
  for (double v : s.sigma) CHECK(v == 0.0);
  CHECK(s.cfg_scale == 15.0);

  auto d = make_schedule(1000, 1e-4, 0.02, 30, SigmaMode::ddpm_matched);
  CHECK(d.sigma[0] == 0.0);  // the last step lands on abar = 1
  for (std::size_t i = 1; i < d.sigma.size(); ++i) CHECK(d.sigma[i] > 0.0);

  CHECK_THROWS(make_schedule(1000, 0.0, 0.02));
  CHECK_THROWS(make_schedule(1000, 0.03, 0.02));
  CHECK_THROWS(make_schedule(1000, 1e-4, 1.0));
  CHECK_THROWS(make_schedule(100, 1e-4, 0.02, 200));
}

TEST_CASE("q_sample") {
  auto s = make_schedule();
  Tensor x0 = randn({4}, 1);
  Tensor eps = randn({4}, 2);
  auto x = q_sample(x0, 0, eps, s);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(x[i] - x0[i]) < 1e-6);
  CHECK_THROWS(q_sample(x0, 1000, eps, s));
  CHECK_THROWS(q_sample(x0, -1, eps, s));
  CHECK_THROWS_AS(q_sample(x0, 5, randn({3}, 2), s), ShapeError);

  // Monte-Carlo moments at t = 400 for a fixed scalar x0 = 0.7
  const int n = 10000, t = 400;
  Tensor big_x0({n}, 0.7);
  auto xt = q_sample(big_x0, t, randn({n}, 3), s);
  double m = 0, v = 0;
  for (int i = 0; i < n; ++i) m += xt[i];
  m /= n;
  for (int i = 0; i < n; ++i) v += (xt[i] - m) * (xt[i] - m);
  v /= n - 1;
  const double target_m = std::sqrt(s.alpha_bar[t]) * 0.7, target_v = 1 - s.alpha_bar[t];
  CHECK(std::abs(m - target_m) < 3 * std::sqrt(target_v / n));
  CHECK(std::abs(v - target_v) < 3 * target_v * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("mu_from_eps") {
  auto s = make_schedule();
  Tensor x = randn({5}, 4);
  auto mu = mu_from_eps(x, Tensor({5}, 0.0), 500, 400, s);
  for (int i = 0; i < 5; ++i) CHECK(mu[i] == doctest::Approx(std::sqrt(s.alpha_bar[400] / s.alpha_bar[500]) * x[i]).epsilon(1e-14));

  // Scalar case abar_t = 0.5, abar_prev = 0.7, x = eps = 1. The noise coefficient is the DDIM one,
  // sqrt(1 - abar_prev) - sqrt(abar_prev) sqrt(1 - abar_t) / sqrt(abar_t), which is what makes the
  // deterministic DDIM step and this mean coincide.
  auto h = s;
  h.alpha_bar[10] = 0.5;
  h.alpha_bar[9] = 0.7;
  auto m = mu_from_eps(Tensor::from({1.0}), Tensor::from({1.0}), 10, 9, h);
  const double expected = std::sqrt(0.7) / std::sqrt(0.5) + (std::sqrt(0.3) - std::sqrt(0.7) * std::sqrt(0.5) / std::sqrt(0.5));
  CHECK(m.item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(m.item() == doctest::Approx(0.894279).epsilon(1e-6));

  CHECK_THROWS(mu_from_eps(x, x, 0, s));
  Tensor e = randn({5}, 5);
  for (int i = 1; i <= 30; ++i) {
    const int t = s.timesteps[i], tp = s.timesteps[i - 1];
    auto a = mu_from_eps(x, e, t, s);
    auto b = ddim_step(x, e, t, tp, s, Tensor({5}, 0.0));
    for (int k = 0; k < 5; ++k) CHECK(std::abs(a[k] - b[k]) < 1e-10);
  }
}

TEST_CASE("ddim_step identities") {
  auto s = make_schedule();
  Tensor x0 = randn({6}, 7), eps = randn({6}, 8);
  for (int i = 1; i <= 30; ++i) {
    const int t = s.timesteps[i], tp = s.timesteps[i - 1];
    auto z = q_sample(x0, t, eps, s);
    auto prev = ddim_step(z, eps, t, tp, s, randn({6}, 9));
    auto want = q_sample(x0, tp, eps, s);
    for (int k = 0; k < 6; ++k) CHECK(std::abs(prev[k] - want[k]) < 1e-10);
  }
  auto z = q_sample(x0, s.timesteps[1], eps, s);
  auto end = ddim_step(z, eps, s.timesteps[1], 0, s, Tensor({6}, 0.0));
  for (int k = 0; k < 6; ++k) CHECK(std::abs(end[k] - x0[k]) < 1e-8);

  CHECK_THROWS(ddim_step(z, eps, 500, 400, s, Tensor({6}, 0.0), 2.0));
}

TEST_CASE("forward/reverse identity over random schedules") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    const double b0 = rng.uniform(1e-5, 1e-3), b1 = rng.uniform(5e-3, 0.05);
    const int steps = 5 + static_cast<int>(rng.index(50));
    auto s = make_schedule(1000, b0, b1, steps);
    Tensor x0 = randn({3}, seed + 100), eps = randn({3}, seed + 200);
    for (int i = 1; i <= s.steps(); ++i) {
      const int t = s.timesteps[i], tp = s.timesteps[i - 1];
      auto prev = ddim_step(q_sample(x0, t, eps, s), eps, t, tp, s, Tensor({3}, 0.0));
      auto want = q_sample(x0, tp, eps, s);
      for (int k = 0; k < 3; ++k) REQUIRE(std::abs(prev[k] - want[k]) < 1e-9);
    }
  }
}

TEST_CASE("classifier-free guidance algebra") {
  int calls = 0;
  EpsilonFn f = [&](const Tensor& z, int, const Tensor& cond) {
    ++calls;
    return add(mul_scalar(z, 0.5), Tensor({z.size()}, cond[0]));
  };
  Tensor z = randn({4}, 1), cond({1, 1}, 2.0), null({1, 1}, 0.0);
  auto e0 = cfg_epsilon(f, z, 10, cond, null, 0.0);
  CHECK(calls == 2);
  auto e1 = cfg_epsilon(f, z, 10, cond, null, 1.0);
  CHECK(bit_equal(e0, f(z, 10, null)));
  CHECK(bit_equal(e1, f(z, 10, cond)));
  // three-point collinearity in s
  auto e15 = cfg_epsilon(f, z, 10, cond, null, 15.0);
  auto e7 = cfg_epsilon(f, z, 10, cond, null, 7.0);
  for (int k = 0; k < 4; ++k) {
    const double slope = (e15[k] - e0[k]) / 15.0;
    CHECK(std::abs(e7[k] - (e0[k] + 7.0 * slope)) < 1e-10);
  }
  CHECK(testing::values_of(null_like(Tensor({2, 3}, 1.0))) == std::vector<double>(6, 0.0));
}

TEST_CASE("sampling loop") {
  DenoiserModel d(DenoiserConfig{}, 1);
  Codec id;
  auto s = make_schedule();
  Tensor cond = null_condition(2, 32);
  auto a = sample(d, id, s, cond, 5, 2);
  auto b = sample(d, id, s, cond, 5, 2);
  CHECK(bit_equal(a.x0, b.x0));
  CHECK(a.trace.steps.size() == 30);
  CHECK(a.x0.shape() == Shape{2, 1, 16, 16});
  for (const auto& st : a.trace.steps) CHECK(is_finite(st.z));

  int calls = 0;
  EpsilonFn blowup = [&](const Tensor& z, int, const Tensor&) {
    ++calls;
    return calls > 10 ? Tensor(z.shape(), std::numeric_limits<double>::infinity()) : Tensor(z.shape(), 0.0);
  };
  std::vector<std::uint64_t> seeds{1};
  CHECK_THROWS_WITH_AS(sample_with(blowup, id, s, Tensor({1, 1}, 1.0), seeds), doctest::Contains("step"), NumericError);
}
