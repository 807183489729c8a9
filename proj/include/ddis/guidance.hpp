#pragma once

#include <vector>

#include "ddis/classifier.hpp"
#include "ddis/codec.hpp"
#include "ddis/diffusion.hpp"

namespace ddis {

struct DagConfig {
  double lambda_bn = 0.01;
  double s_g = 20.0;
  std::vector<int> apply_range;  // timesteps to correct at; empty means every step
  bool squared = false;          // ablation: squared norms in L_BN
  double knee = 0.9;             // smooth clamp of decoded images

  double eta() const { return lambda_bn * s_g; }
  void validate() const;
};

/// Sum over layers of ||mu_l(x) - mu_l|| + ||var_l(x) - var_l||.
Tensor bn_alignment_loss(const FeatureStatistics& batch, const FeatureStatistics& running, bool squared = false);

/// Decoded latents mapped into the classifier's input range.
Tensor classifier_input(const Tensor& decoded, double knee = 0.9);

/// L_BN of an image batch (already in classifier range) against running statistics.
Tensor image_bn_loss(const ClassifierModel& classifier, const Tensor& images, const FeatureStatistics& running,
                     bool squared = false);

struct DagStep {
  Tensor z;     // corrected latent
  double loss;  // L_BN at the input latent
};

/// z~ = z - eta grad_z L_BN(D(z)). The gradient is taken on a detached copy, so
/// a z that is itself on a tape passes through with an identity Jacobian.
DagStep dag_correct(const Tensor& z, const ClassifierModel& classifier, const Codec& codec,
                    const FeatureStatistics& running, const DagConfig& config);

/// Gradient of L_BN(D(z)) with respect to z.
Tensor dag_gradient(const Tensor& z, const ClassifierModel& classifier, const Codec& codec,
                    const FeatureStatistics& running, const DagConfig& config, double* loss = nullptr);

LatentCorrector make_dag_corrector(const ClassifierModel& classifier, const Codec& codec,
                                   const FeatureStatistics& running, const DagConfig& config);

SampleResult guided_sample(const EpsilonFn& eps, const Codec& codec, const ClassifierModel& classifier,
                           const NoiseSchedule& s, const Tensor& cond, const DagConfig& config,
                           std::span<const std::uint64_t> seeds);
SampleResult guided_sample(const DenoiserModel& denoiser, const Codec& codec, const ClassifierModel& classifier,
                           const NoiseSchedule& s, const Tensor& cond, const DagConfig& config,
                           std::span<const std::uint64_t> seeds);

struct SweepCell {
  double lambda_bn, s_g, eta;
  double final_l_bn;     // L_BN of the decoded batch
  double mean_step_l_bn; // average of the per-step values
  double pixel_mean, pixel_std;
};

/// Grid over lambda_bn x s_g with shared seeds.
std::vector<SweepCell> sweep_dag(const DenoiserModel& denoiser, const Codec& codec, const ClassifierModel& classifier,
                                 const NoiseSchedule& s, const Tensor& cond, const std::vector<double>& lambdas,
                                 const std::vector<double>& scales, std::span<const std::uint64_t> seeds);

}  // namespace ddis
