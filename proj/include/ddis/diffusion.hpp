#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/tensor.hpp"

namespace ddis {

enum class SigmaMode { deterministic, ddpm_matched };

/// Timestep 0 is clean data (alpha_bar[0] = 1); alpha_bar[t] = prod_{s=1..t} (1 - beta[s]).
struct NoiseSchedule {
  int train_steps = 0;
  std::vector<double> beta, alpha, alpha_bar;  // indexed by t in [0, train_steps)
  std::vector<int> timesteps;                  // ascending, timesteps[0] = 0, size steps()+1
  std::vector<double> sigma;                   // sigma[i] for the step timesteps[i+1] -> timesteps[i]
  SigmaMode mode = SigmaMode::deterministic;
  double cfg_scale = 15.0;

  int steps() const { return static_cast<int>(timesteps.size()) - 1; }
  double abar(int t) const;
};

NoiseSchedule make_schedule(int train_steps = 1000, double beta_start = 1e-4, double beta_end = 0.02,
                            int sample_steps = 30, SigmaMode mode = SigmaMode::deterministic,
                            double cfg_scale = 15.0);

/// DDIM stochasticity between two timesteps; 0 in deterministic mode.
double step_sigma(const NoiseSchedule& s, int t, int t_prev);

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

/// Mean of the previous latent from a noise prediction. The one-argument form
/// steps to the sampling predecessor of t (or t-1 when t is off the grid).
Tensor mu_from_eps(const Tensor& x_t, const Tensor& eps, int t, const NoiseSchedule& s);
Tensor mu_from_eps(const Tensor& x_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s);

/// Predicted clean latent (z_t - sqrt(1-abar) eps) / sqrt(abar).
Tensor predict_x0(const Tensor& z_t, const Tensor& eps, int t, const NoiseSchedule& s);

/// z_{t_prev} = sqrt(abar') x0_hat + sqrt(1 - abar' - sigma^2) eps + sigma noise.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s,
                 const Tensor& noise, double sigma);
Tensor ddim_step(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s,
                 const Tensor& noise);

/// Noise predictor as a plain callable (the denoiser, a reweighted view, or an oracle).
using EpsilonFn = std::function<Tensor(const Tensor& z, int t, const Tensor& cond)>;

EpsilonFn epsilon_of(const DenoiserModel& model);
EpsilonFn epsilon_of(const DenoiserView& view);

/// eps_null + s (eps_cond - eps_null); exactly two predictor calls.
Tensor cfg_epsilon(const EpsilonFn& eps, const Tensor& z, int t, const Tensor& cond, const Tensor& null_cond,
                   double s);
Tensor cfg_epsilon(const DenoiserModel& model, const Tensor& z, int t, const Tensor& cond, double s);

/// Null condition matching a token sequence (zeros of shape [L, d_e]).
Tensor null_like(const Tensor& cond);

struct StepRecord {
  int t = 0;
  int t_prev = 0;
  Tensor z;        // latent entering the step
  Tensor z_tilde;  // after any guidance correction
  Tensor eps;      // guided noise prediction
  double l_bn = 0.0;
  bool has_l_bn = false;
};

struct SampleTrace {
  std::vector<StepRecord> steps;  // in sampling order, t descending
  Tensor z0;
  std::vector<std::uint64_t> seeds;
};

struct SampleResult {
  Tensor x0;  // decoded images
  SampleTrace trace;
};

/// Hook applied to z_t before the noise prediction of each step; returns z~_t
/// and writes the loss it reports (if any).
using LatentCorrector = std::function<Tensor(const Tensor& z, int t, double& loss, bool& has_loss)>;

struct SamplerOptions {
  LatentCorrector corrector;  // empty: plain sampling
  bool record = true;         // keep per-step tensors in the trace
};

/// One reverse step i (timesteps[i] -> timesteps[i-1]) of the shared loop:
/// correct, predict with CFG, advance. `seeds` index the per-sample noise streams.
Tensor reverse_step(const EpsilonFn& eps, const NoiseSchedule& s, const Tensor& cond, const Tensor& z, int i,
                    std::span<const std::uint64_t> seeds, const SamplerOptions& options, StepRecord* record);

/// Runs steps from index `from` down to `to` (exclusive), i.e. latent at timesteps[from] to timesteps[to].
Tensor run_reverse(const EpsilonFn& eps, const NoiseSchedule& s, const Tensor& cond, Tensor z, int from, int to,
                   std::span<const std::uint64_t> seeds, const SamplerOptions& options, SampleTrace* trace);

/// Initial latent z_T, one standard-normal draw per seed.
Tensor initial_latent(const Shape& latent_shape, std::span<const std::uint64_t> seeds);

/// Full loop from z_T to decoded x0_hat. Batch size equals seeds.size().
SampleResult sample_with(const EpsilonFn& eps, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                         std::span<const std::uint64_t> seeds, const SamplerOptions& options = {});

SampleResult sample(const DenoiserModel& model, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                    std::span<const std::uint64_t> seeds);
/// Batch of `count` samples drawn from the seed stream of `seed`.
SampleResult sample(const DenoiserModel& model, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                    std::uint64_t seed, std::size_t count);

}  // namespace ddis
