#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "ddis/diffusion.hpp"

namespace ddis {

struct GaussianComponent {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  double weight = 1.0;
  int label = 0;
};

/// Gaussian mixture pushed through the forward process: component k at time t
/// is N(sqrt(abar) mu_k, abar Sigma_k + (1 - abar) I). Everything is exact.
class MixtureDiffusion {
 public:
  MixtureDiffusion(std::vector<GaussianComponent> components, NoiseSchedule schedule);

  int dim() const { return dim_; }
  int classes() const { return classes_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::vector<GaussianComponent>& components() const { return comps_; }

  double log_density(const Eigen::VectorXd& x, int t) const;
  /// log p_t(x | y) (components of class y, weights renormalized).
  double class_log_density(const Eigen::VectorXd& x, int t, int y) const;
  Eigen::VectorXd marginal_score(const Eigen::VectorXd& x, int t) const;
  Eigen::VectorXd class_score(const Eigen::VectorXd& x, int t, int y) const;
  double class_posterior(const Eigen::VectorXd& x, int t, int y) const;
  /// grad_x log p_t(y | x), differentiated through the tensor tape.
  Eigen::VectorXd log_posterior_grad(const Eigen::VectorXd& x, int t, int y) const;

  /// Optimal noise predictors: -sqrt(1 - abar) times the score.
  Eigen::VectorXd epsilon(const Eigen::VectorXd& x, int t) const;
  Eigen::VectorXd epsilon(const Eigen::VectorXd& x, int t, int y) const;
  /// Classifier guidance with sigma_t = sqrt(1 - abar_t).
  Eigen::VectorXd cg_epsilon(const Eigen::VectorXd& x, int t, int y, double s) const;
  Eigen::VectorXd cfg_epsilon(const Eigen::VectorXd& x, int t, int y, double s) const;

  /// Clean-data moments (optionally restricted to class y; -1 = all).
  Eigen::VectorXd data_mean(int y = -1) const;
  Eigen::MatrixXd data_cov(int y = -1) const;

  /// Noise predictor for the shared sampler. cond is [1,1]: 0 means the null
  /// condition, y+1 selects class y.
  EpsilonFn sampler_epsilon() const;
  /// Same, but the conditional branch is replaced by classifier guidance at scale s.
  EpsilonFn sampler_cg_epsilon(double s) const;

 private:
  struct Diffused {
    Eigen::VectorXd mean;
    Eigen::MatrixXd precision;
    double log_norm;  // log weight - 0.5 log det(2 pi cov)
  };
  std::vector<Diffused> diffused(int t) const;
  double log_sum(const Eigen::VectorXd& x, const std::vector<Diffused>& d, int y) const;
  Eigen::VectorXd score_of(const Eigen::VectorXd& x, const std::vector<Diffused>& d, int y) const;

  std::vector<GaussianComponent> comps_;
  NoiseSchedule schedule_;
  int dim_ = 0;
  int classes_ = 0;
};

/// Condition tensor understood by MixtureDiffusion::sampler_epsilon.
Tensor oracle_condition(int y);

struct MomentReport {
  std::size_t samples = 0;
  int steps = 0;
  Eigen::VectorXd mean, target_mean, mean_band;  // band = 3 * sd / sqrt(n)
  Eigen::MatrixXd cov, target_cov, cov_band;
  // Exact law of the discretized sampler (single-Gaussian targets only).
  Eigen::VectorXd exact_mean;
  Eigen::MatrixXd exact_cov;
  bool has_exact = false;
  bool mean_ok = false, cov_ok = false;            // vs the target distribution
  bool exact_mean_ok = false, exact_cov_ok = false;  // vs the discretized law
  double mean_error = 0.0, cov_error = 0.0;        // max abs deviation from target
  double class_mass = 0.0;                         // mean p_0(y | x) when a class is requested
};

struct OracleCheckConfig {
  int sample_steps = 30;
  SigmaMode mode = SigmaMode::deterministic;
  std::size_t samples = 10000;
  std::uint64_t seed = 1;
  int target_class = -1;  // -1 unconditional
  double cfg_scale = 1.0;
};

/// Runs the diffusion-core sampler with exact noise predictions and compares
/// moments against the analytic targets.
MomentReport oracle_sample_check(const MixtureDiffusion& mix, const OracleCheckConfig& config);

/// Endpoint samples [n, d] of the shared sampler driven by `eps`.
Eigen::MatrixXd oracle_samples(const EpsilonFn& eps, const NoiseSchedule& s, int dim, int cond_class,
                               std::size_t n, std::uint64_t seed);

/// Exact mean/covariance of the discretized sampler on a single-Gaussian target.
void discretized_moments(const GaussianComponent& g, const NoiseSchedule& s, Eigen::VectorXd& mean,
                         Eigen::MatrixXd& cov);

/// Sample mean and covariance with per-entry 3-sigma Monte-Carlo bands.
void sample_moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::MatrixXd& cov, Eigen::VectorXd& mean_band,
                    Eigen::MatrixXd& cov_band);

}  // namespace ddis
