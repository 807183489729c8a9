#include "ddis/oracle.hpp"

#include <cmath>
#include <numbers>

#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

MixtureDiffusion::MixtureDiffusion(std::vector<GaussianComponent> components, NoiseSchedule schedule)
    : comps_(std::move(components)), schedule_(std::move(schedule)) {
  if (comps_.empty()) throw Error("oracle: mixture needs at least one component");
  dim_ = static_cast<int>(comps_.front().mean.size());
  if (dim_ < 1 || dim_ > 8) throw Error("oracle: dimension must lie in [1, 8]");
  double total = 0.0;
  for (const auto& c : comps_) {
    if (c.mean.size() != dim_ || c.cov.rows() != dim_ || c.cov.cols() != dim_)
      throw ShapeError("oracle: component shapes disagree with dimension " + std::to_string(dim_));
    if ((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw Error("oracle: covariance not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
    if (llt.info() != Eigen::Success) throw Error("oracle: covariance not positive definite");
    if (!(c.weight > 0.0)) throw Error("oracle: weights must be positive");
    if (c.label < 0) throw Error("oracle: negative label");
    total += c.weight;
    classes_ = std::max(classes_, c.label + 1);
  }
  if (std::abs(total - 1.0) > 1e-12) throw Error("oracle: weights must sum to 1");
}

std::vector<MixtureDiffusion::Diffused> MixtureDiffusion::diffused(int t) const {
  const double a = schedule_.abar(t);
  std::vector<Diffused> out;
  for (const auto& c : comps_) {
    Eigen::MatrixXd cov = a * c.cov + (1.0 - a) * Eigen::MatrixXd::Identity(dim_, dim_);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::MatrixXd L = llt.matrixL();
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    out.push_back({std::sqrt(a) * c.mean, llt.solve(Eigen::MatrixXd::Identity(dim_, dim_)),
                   std::log(c.weight) - 0.5 * (dim_ * std::log(2.0 * std::numbers::pi) + logdet)});
  }
  return out;
}

double MixtureDiffusion::log_sum(const Eigen::VectorXd& x, const std::vector<Diffused>& d, int y) const {
  std::vector<double> terms;
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (y >= 0 && comps_[k].label != y) continue;
    const Eigen::VectorXd diff = x - d[k].mean;
    terms.push_back(d[k].log_norm - 0.5 * diff.dot(d[k].precision * diff));
  }
  if (terms.empty()) throw Error("oracle: class " + std::to_string(y) + " has no components");
  const double m = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double v : terms) s += std::exp(v - m);
  return m + std::log(s);
}

Eigen::VectorXd MixtureDiffusion::score_of(const Eigen::VectorXd& x, const std::vector<Diffused>& d, int y) const {
  const double total = log_sum(x, d, y);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(dim_);
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (y >= 0 && comps_[k].label != y) continue;
    const Eigen::VectorXd diff = x - d[k].mean;
    const double r = std::exp(d[k].log_norm - 0.5 * diff.dot(d[k].precision * diff) - total);
    score -= r * (d[k].precision * diff);
  }
  return score;
}

double MixtureDiffusion::log_density(const Eigen::VectorXd& x, int t) const { return log_sum(x, diffused(t), -1); }

double MixtureDiffusion::class_log_density(const Eigen::VectorXd& x, int t, int y) const {
  double w = 0.0;
  for (const auto& c : comps_)
    if (c.label == y) w += c.weight;
  return log_sum(x, diffused(t), y) - std::log(w);
}

Eigen::VectorXd MixtureDiffusion::marginal_score(const Eigen::VectorXd& x, int t) const {
  return score_of(x, diffused(t), -1);
}

Eigen::VectorXd MixtureDiffusion::class_score(const Eigen::VectorXd& x, int t, int y) const {
  return score_of(x, diffused(t), y);
}

double MixtureDiffusion::class_posterior(const Eigen::VectorXd& x, int t, int y) const {
  if (y < 0 || y >= classes_) throw Error("oracle: class " + std::to_string(y) + " out of range");
  const auto d = diffused(t);
  return std::exp(log_sum(x, d, y) - log_sum(x, d, -1));
}

Eigen::VectorXd MixtureDiffusion::log_posterior_grad(const Eigen::VectorXd& x, int t, int y) const {
  if (y < 0 || y >= classes_) throw Error("oracle: class " + std::to_string(y) + " out of range");
  const auto d = diffused(t);
  EnableGradGuard grad_on;
  Tensor xt({dim_}, std::vector<double>(x.data(), x.data() + dim_));
  xt.set_requires_grad(true);
  auto log_sum_tape = [&](int cls) {
    std::vector<Tensor> terms;
    std::vector<double> values;
    for (std::size_t k = 0; k < d.size(); ++k) {
      if (cls >= 0 && comps_[k].label != cls) continue;
      Tensor mean({dim_}, std::vector<double>(d[k].mean.data(), d[k].mean.data() + dim_));
      std::vector<double> p(static_cast<std::size_t>(dim_ * dim_));
      for (int i = 0; i < dim_; ++i)
        for (int j = 0; j < dim_; ++j) p[static_cast<std::size_t>(i * dim_ + j)] = d[k].precision(i, j);
      Tensor diff = sub(xt, mean);
      Tensor pd = reshape(matmul(reshape(diff, {1, dim_}), Tensor({dim_, dim_}, p)), {dim_});
      Tensor term = add_scalar(mul_scalar(sum(mul(pd, diff)), -0.5), d[k].log_norm);
      values.push_back(term.item());
      terms.push_back(reshape(term, {1}));
    }
    const double m = *std::max_element(values.begin(), values.end());
    return add_scalar(log(sum(exp(add_scalar(concat(terms, 0), -m)))), m);
  };
  Tensor lp = sub(log_sum_tape(y), log_sum_tape(-1));
  backward(lp);
  Tensor g = xt.grad();
  return Eigen::Map<const Eigen::VectorXd>(g.data().data(), dim_);
}

Eigen::VectorXd MixtureDiffusion::epsilon(const Eigen::VectorXd& x, int t) const {
  return -std::sqrt(1.0 - schedule_.abar(t)) * marginal_score(x, t);
}

Eigen::VectorXd MixtureDiffusion::epsilon(const Eigen::VectorXd& x, int t, int y) const {
  return -std::sqrt(1.0 - schedule_.abar(t)) * class_score(x, t, y);
}

Eigen::VectorXd MixtureDiffusion::cg_epsilon(const Eigen::VectorXd& x, int t, int y, double s) const {
  if (!(s >= 0.0)) throw Error("cg_epsilon: scale must be >= 0");
  const double sigma = std::sqrt(1.0 - schedule_.abar(t));
  return epsilon(x, t, y) - s * sigma * log_posterior_grad(x, t, y);
}

Eigen::VectorXd MixtureDiffusion::cfg_epsilon(const Eigen::VectorXd& x, int t, int y, double s) const {
  const Eigen::VectorXd u = epsilon(x, t);
  return u + s * (epsilon(x, t, y) - u);
}

Eigen::VectorXd MixtureDiffusion::data_mean(int y) const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim_);
  double w = 0.0;
  for (const auto& c : comps_)
    if (y < 0 || c.label == y) {
      m += c.weight * c.mean;
      w += c.weight;
    }
  return m / w;
}

Eigen::MatrixXd MixtureDiffusion::data_cov(int y) const {
  const Eigen::VectorXd m = data_mean(y);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(dim_, dim_);
  double w = 0.0;
  for (const auto& c : comps_)
    if (y < 0 || c.label == y) {
      s += c.weight * (c.cov + c.mean * c.mean.transpose());
      w += c.weight;
    }
  return s / w - m * m.transpose();
}

Tensor oracle_condition(int y) { return Tensor({1, 1}, static_cast<double>(y + 1)); }

namespace {
template <class F>
Tensor rowwise(const Tensor& z, int dim, F&& f) {
  if (z.ndim() != 2 || z.dim(1) != dim)
    throw ShapeError("oracle: latent must be [n, " + std::to_string(dim) + "], got " + to_string(z.shape()));
  Tensor out(z.shape(), 0.0);
  for (std::int64_t r = 0; r < z.dim(0); ++r) {
    Eigen::Map<const Eigen::VectorXd> x(z.data().data() + r * dim, dim);
    Eigen::VectorXd e = f(Eigen::VectorXd(x));
    std::copy(e.data(), e.data() + dim, out.data().begin() + r * dim);
  }
  return out;
}
}  // namespace

EpsilonFn MixtureDiffusion::sampler_epsilon() const {
  return [this](const Tensor& z, int t, const Tensor& cond) {
    const int y = static_cast<int>(cond[0]) - 1;
    const auto d = diffused(t);
    const double sc = -std::sqrt(1.0 - schedule_.abar(t));
    return rowwise(z, dim_, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return sc * score_of(x, d, y); });
  };
}

EpsilonFn MixtureDiffusion::sampler_cg_epsilon(double s) const {
  return [this, s](const Tensor& z, int t, const Tensor& cond) {
    const int y = static_cast<int>(cond[0]) - 1;
    if (y < 0) return sampler_epsilon()(z, t, cond);
    return rowwise(z, dim_, [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return cg_epsilon(x, t, y, s); });
  };
}

Eigen::MatrixXd oracle_samples(const EpsilonFn& eps, const NoiseSchedule& s, int dim, int cond_class, std::size_t n,
                               std::uint64_t seed) {
  NoGradGuard guard;
  auto seeds = seed_stream(seed, n);
  SamplerOptions options;
  options.record = false;
  Tensor z = initial_latent({dim}, seeds);
  z = run_reverse(eps, s, oracle_condition(cond_class), z, s.steps(), 0, seeds, options, nullptr);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), dim);
  for (std::size_t r = 0; r < n; ++r)
    for (int j = 0; j < dim; ++j) out(static_cast<Eigen::Index>(r), j) = z[static_cast<std::int64_t>(r) * dim + j];
  return out;
}

void sample_moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::MatrixXd& cov, Eigen::VectorXd& mean_band,
                    Eigen::MatrixXd& cov_band) {
  const auto n = static_cast<double>(x.rows());
  const int d = static_cast<int>(x.cols());
  mean = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
  cov = (c.transpose() * c) / (n - 1.0);
  mean_band = 3.0 * (cov.diagonal().array().sqrt() / std::sqrt(n)).matrix();
  cov_band.resize(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const Eigen::ArrayXd prod = c.col(i).array() * c.col(j).array();
      const double m = prod.mean();
      const double sd = std::sqrt((prod - m).square().sum() / (n - 1.0));
      cov_band(i, j) = 3.0 * sd / std::sqrt(n);
    }
}

void discretized_moments(const GaussianComponent& g, const NoiseSchedule& s, Eigen::VectorXd& mean,
                         Eigen::MatrixXd& cov) {
  const int d = static_cast<int>(g.mean.size());
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  mean = Eigen::VectorXd::Zero(d);
  cov = I;
  for (int i = s.steps(); i >= 1; --i) {
    const int t = s.timesteps[static_cast<std::size_t>(i)], tp = s.timesteps[static_cast<std::size_t>(i) - 1];
    const double a = s.abar(t), ap = s.abar(tp), sigma = s.sigma[static_cast<std::size_t>(i) - 1];
    const Eigen::MatrixXd vinv = (a * g.cov + (1.0 - a) * I).inverse();
    const double k = std::sqrt(1.0 - ap - sigma * sigma) - std::sqrt(ap) * std::sqrt(1.0 - a) / std::sqrt(a);
    const Eigen::MatrixXd A = std::sqrt(ap) / std::sqrt(a) * I + k * std::sqrt(1.0 - a) * vinv;
    const Eigen::VectorXd c = -k * std::sqrt(1.0 - a) * std::sqrt(a) * (vinv * g.mean);
    mean = A * mean + c;
    cov = A * cov * A.transpose() + sigma * sigma * I;
  }
}

MomentReport oracle_sample_check(const MixtureDiffusion& mix, const OracleCheckConfig& config) {
  const auto& base = mix.schedule();
  NoiseSchedule s = make_schedule(base.train_steps, base.beta[0], base.beta.back(), config.sample_steps, config.mode,
                                  config.cfg_scale);
  MixtureDiffusion local(mix.components(), s);
  MomentReport r;
  r.samples = config.samples;
  r.steps = config.sample_steps;
  const Eigen::MatrixXd x =
      oracle_samples(local.sampler_epsilon(), s, mix.dim(), config.target_class, config.samples, config.seed);
  sample_moments(x, r.mean, r.cov, r.mean_band, r.cov_band);
  r.target_mean = mix.data_mean(config.target_class);
  r.target_cov = mix.data_cov(config.target_class);
  r.mean_error = (r.mean - r.target_mean).cwiseAbs().maxCoeff();
  r.cov_error = (r.cov - r.target_cov).cwiseAbs().maxCoeff();
  r.mean_ok = ((r.mean - r.target_mean).cwiseAbs().array() <= r.mean_band.array()).all();
  r.cov_ok = ((r.cov - r.target_cov).cwiseAbs().array() <= r.cov_band.array()).all();

  std::vector<GaussianComponent> active;
  for (const auto& c : mix.components())
    if (config.target_class < 0 || c.label == config.target_class) active.push_back(c);
  if (active.size() == 1) {
    discretized_moments(active.front(), s, r.exact_mean, r.exact_cov);
    r.has_exact = true;
    r.exact_mean_ok = ((r.mean - r.exact_mean).cwiseAbs().array() <= r.mean_band.array()).all();
    r.exact_cov_ok = ((r.cov - r.exact_cov).cwiseAbs().array() <= r.cov_band.array()).all();
  }
  if (config.target_class >= 0) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) m += mix.class_posterior(x.row(i).transpose(), 0, config.target_class);
    r.class_mass = m / static_cast<double>(x.rows());
  }
  return r;
}

}  // namespace ddis
