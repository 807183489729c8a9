#include "ddis/experiments.hpp"
#include "ddis/oracle.hpp"
#include "helpers.hpp"

using namespace ddis;

namespace {

GaussianComponent comp(std::vector<double> mean, std::vector<double> cov, double w, int label) {
  const auto d = static_cast<Eigen::Index>(mean.size());
  GaussianComponent g;
  g.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), d);
  g.cov = Eigen::Map<Eigen::MatrixXd>(cov.data(), d, d);
  g.weight = w;
  g.label = label;
  return g;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return x;
}

// central differences of a scalar function of x
template <class F>
Eigen::VectorXd numeric_grad(F f, const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

double rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / (b.cwiseAbs().maxCoeff() + 1e-12);
}

}  // namespace

TEST_CASE("scores") {
  auto s = make_schedule();
  MixtureDiffusion unit({comp({0, 0}, {1, 0, 0, 1}, 1.0, 0)}, s);
  auto x = vec({0.3, -1.7});
  CHECK((unit.marginal_score(x, 0) + x).norm() < 1e-14);
  // standard normal stays standard normal under the forward process
  CHECK((unit.marginal_score(x, 700) + x).norm() < 1e-12);

  MixtureDiffusion sym({comp({2, 0}, {0.5, 0, 0, 0.5}, 0.5, 0), comp({-2, 0}, {0.5, 0, 0, 0.5}, 0.5, 1)}, s);
  CHECK(sym.marginal_score(vec({0, 0}), 0).norm() < 1e-14);
  CHECK(sym.marginal_score(vec({0, 0}), 300).norm() < 1e-14);
  CHECK(sym.class_posterior(vec({0, 1.3}), 0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sym.class_posterior(vec({0, -0.4}), 500, 1) == doctest::Approx(0.5).epsilon(1e-14));

  auto mix = two_class_oracle(s);
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const int t = static_cast<int>(rng.uniform(0.0, 999.0));
    auto p = vec({rng.normal() * 2, rng.normal() * 2});
    CHECK(rel(mix.marginal_score(p, t), numeric_grad([&](const auto& q) { return mix.log_density(q, t); }, p)) < 1e-8);
    const int y = rep % 2;
    // near the class boundary, where the posterior is not saturated
    auto b = vec({0.25 + 0.3 * rng.normal(), 0.25 + 0.3 * rng.normal()});
    CHECK(rel(mix.log_posterior_grad(b, t, y), numeric_grad([&](const auto& q) {
                return mix.class_log_density(q, t, y) + std::log(y == 0 ? 0.7 : 0.3) - mix.log_density(q, t);
              }, b)) < 1e-8);
    CHECK(mix.class_posterior(p, t, 0) + mix.class_posterior(p, t, 1) == doctest::Approx(1.0).epsilon(1e-12));
    // Bayes: conditional score = marginal score + grad log posterior
    Eigen::VectorXd lhs = mix.class_score(p, t, y);
    Eigen::VectorXd rhs = mix.marginal_score(p, t) + mix.log_posterior_grad(p, t, y);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
    // noise predictor identity
    CHECK((mix.epsilon(p, t) + std::sqrt(1.0 - s.abar(t)) * mix.marginal_score(p, t)).norm() < 1e-13);
  }
}

TEST_CASE("guidance algebra") {
  auto s = make_schedule();
  auto mix = two_class_oracle(s);
  auto x = vec({0.2, 0.1});
  for (int t : {1, 250, 900}) {
    CHECK(mix.cg_epsilon(x, t, 1, 0.0) == mix.epsilon(x, t, 1));
    const double sg = std::sqrt(1.0 - s.abar(t));
    Eigen::VectorXd want = mix.epsilon(x, t, 1) - 2.0 * sg * mix.log_posterior_grad(x, t, 1);
    CHECK((mix.cg_epsilon(x, t, 1, 2.0) - want).norm() < 1e-12);
    CHECK((mix.cfg_epsilon(x, t, 0, 1.0) - mix.epsilon(x, t, 0)).norm() < 1e-13);
    CHECK((mix.cfg_epsilon(x, t, 0, 0.0) - mix.epsilon(x, t)).norm() < 1e-13);
  }
  // sampler adapter: class condition vs null condition
  auto eps = mix.sampler_epsilon();
  Tensor z({1, 2}, std::vector<double>{0.2, 0.1});
  Tensor e1 = eps(z, 250, oracle_condition(1));
  Tensor e0 = eps(z, 250, oracle_condition(-1));
  CHECK(e1[0] == doctest::Approx(mix.epsilon(x, 250, 1)[0]).epsilon(1e-14));
  CHECK(e0[1] == doctest::Approx(mix.epsilon(x, 250)[1]).epsilon(1e-14));
}

TEST_CASE("moments of the discretized sampler") {
  auto s = make_schedule();
  auto g = gaussian_oracle(s, 3, 4);
  REQUIRE(g.components().size() == 1);
  // deterministic DDIM is affine in z_T, so the sample law is Gaussian with the exact moments
  OracleCheckConfig cfg;
  cfg.samples = 2000;
  cfg.seed = 9;
  auto r = oracle_sample_check(g, cfg);
  REQUIRE(r.has_exact);
  CHECK(r.exact_mean_ok);
  CHECK(r.exact_cov_ok);
  CHECK(r.mean_ok);
  // longer chains land closer to the data law
  Eigen::VectorXd m30, m200;
  Eigen::MatrixXd c30, c200;
  discretized_moments(g.components()[0], make_schedule(1000, 1e-4, 0.02, 30), m30, c30);
  discretized_moments(g.components()[0], make_schedule(1000, 1e-4, 0.02, 200), m200, c200);
  CHECK((c200 - g.components()[0].cov).norm() <= (c30 - g.components()[0].cov).norm());
}

TEST_CASE("classifier guidance raises class mass") {
  auto s = make_schedule(1000, 1e-4, 0.02, 30, SigmaMode::deterministic, 1.0);
  auto mix = two_class_oracle(s);
  auto plain = oracle_samples(mix.sampler_epsilon(), s, 2, 1, 1500, 21);
  auto guided = oracle_samples(mix.sampler_cg_epsilon(3.0), s, 2, 1, 1500, 21);
  double a = 0.0, b = 0.0;
  for (Eigen::Index i = 0; i < plain.rows(); ++i) {
    a += mix.class_posterior(plain.row(i).transpose(), 0, 1);
    b += mix.class_posterior(guided.row(i).transpose(), 0, 1);
  }
  CHECK(b > a);
}
