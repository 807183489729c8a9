#include "ddis/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "ddis/ops.hpp"

namespace ddis {

void DagConfig::validate() const {
  if (!(lambda_bn >= 0.0) || !(s_g >= 0.0)) throw Error("DAG: lambda_bn and s_g must be >= 0");
  if (!(knee > 0.0 && knee < 1.0)) throw Error("DAG: clamp knee must lie in (0, 1)");
}

Tensor bn_alignment_loss(const FeatureStatistics& batch, const FeatureStatistics& running, bool squared) {
  if (batch.layers() != running.layers() || batch.vars.size() != batch.layers() ||
      running.vars.size() != running.layers())
    throw ShapeError("bn_alignment_loss: " + std::to_string(batch.layers()) + " batch layers vs " +
                     std::to_string(running.layers()) + " running layers");
  if (batch.layers() == 0) throw ShapeError("bn_alignment_loss: no layers");
  auto term = [squared](const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
      throw ShapeError("bn_alignment_loss: channel shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    Tensor d = sub(a, b);
    return squared ? sum(square(d)) : l2_norm(d);
  };
  Tensor total;
  for (std::size_t l = 0; l < batch.layers(); ++l) {
    Tensor layer = add(term(batch.means[l], running.means[l]), term(batch.vars[l], running.vars[l]));
    total = l == 0 ? layer : add(total, layer);
  }
  return total;
}

Tensor classifier_input(const Tensor& decoded, double knee) { return smooth_clamp(decoded, knee); }

Tensor image_bn_loss(const ClassifierModel& classifier, const Tensor& images, const FeatureStatistics& running,
                     bool squared) {
  auto out = classifier.forward(images, true);
  return bn_alignment_loss(*out.stats, running, squared);
}

Tensor dag_gradient(const Tensor& z, const ClassifierModel& classifier, const Codec& codec,
                    const FeatureStatistics& running, const DagConfig& config, double* loss) {
  EnableGradGuard grad_on;
  Tensor leaf = z.detach();
  leaf.set_requires_grad(true);
  Tensor l = image_bn_loss(classifier, classifier_input(codec.decode(leaf), config.knee), running, config.squared);
  if (loss != nullptr) *loss = l.item();
  if (!l.requires_grad()) return Tensor(z.shape(), 0.0);
  backward(l);
  Tensor g = leaf.grad();
  if (!is_finite(g)) throw NumericError("DAG: non-finite L_BN gradient");
  return g;
}

DagStep dag_correct(const Tensor& z, const ClassifierModel& classifier, const Codec& codec,
                    const FeatureStatistics& running, const DagConfig& config) {
  config.validate();
  if (!is_finite(z)) throw NumericError("DAG: non-finite latent");
  const double eta = config.eta();
  if (eta == 0.0) {
    NoGradGuard guard;
    double loss = image_bn_loss(classifier, classifier_input(codec.decode(z.detach()), config.knee), running,
                                config.squared)
                      .item();
    return {z, loss};
  }
  double loss = 0.0;
  Tensor g = dag_gradient(z, classifier, codec, running, config, &loss);
  return {sub(z, mul_scalar(g, eta)), loss};
}

LatentCorrector make_dag_corrector(const ClassifierModel& classifier, const Codec& codec,
                                   const FeatureStatistics& running, const DagConfig& config) {
  config.validate();
  return [&classifier, &codec, running, config](const Tensor& z, int t, double& loss, bool& has_loss) {
    if (!config.apply_range.empty() &&
        std::find(config.apply_range.begin(), config.apply_range.end(), t) == config.apply_range.end()) {
      has_loss = false;
      return z;
    }
    DagStep step;
    try {
      step = dag_correct(z, classifier, codec, running, config);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at t=" + std::to_string(t));
    }
    loss = step.loss;
    has_loss = true;
    return step.z;
  };
}

SampleResult guided_sample(const EpsilonFn& eps, const Codec& codec, const ClassifierModel& classifier,
                           const NoiseSchedule& s, const Tensor& cond, const DagConfig& config,
                           std::span<const std::uint64_t> seeds) {
  NoGradGuard guard;
  SamplerOptions options;
  options.corrector = make_dag_corrector(classifier, codec, running_statistics(classifier), config);
  return sample_with(eps, codec, s, cond, seeds, options);
}

SampleResult guided_sample(const DenoiserModel& denoiser, const Codec& codec, const ClassifierModel& classifier,
                           const NoiseSchedule& s, const Tensor& cond, const DagConfig& config,
                           std::span<const std::uint64_t> seeds) {
  return guided_sample(epsilon_of(denoiser), codec, classifier, s, cond, config, seeds);
}

std::vector<SweepCell> sweep_dag(const DenoiserModel& denoiser, const Codec& codec, const ClassifierModel& classifier,
                                 const NoiseSchedule& s, const Tensor& cond, const std::vector<double>& lambdas,
                                 const std::vector<double>& scales, std::span<const std::uint64_t> seeds) {
  const auto running = running_statistics(classifier);
  std::vector<SweepCell> cells;
  for (double lam : lambdas)
    for (double sg : scales) {
      DagConfig cfg;
      cfg.lambda_bn = lam;
      cfg.s_g = sg;
      auto res = guided_sample(denoiser, codec, classifier, s, cond, cfg, seeds);
      SweepCell cell{lam, sg, cfg.eta(), 0, 0, 0, 0};
      NoGradGuard guard;
      Tensor x = classifier_input(res.x0, cfg.knee);
      cell.final_l_bn = image_bn_loss(classifier, x, running).item();
      for (const auto& r : res.trace.steps) cell.mean_step_l_bn += r.l_bn;
      cell.mean_step_l_bn /= static_cast<double>(std::max<std::size_t>(1, res.trace.steps.size()));
      cell.pixel_mean = mean(x).item();
      cell.pixel_std = std::sqrt(mean(square(add_scalar(x, -cell.pixel_mean))).item());
      if (!std::isfinite(cell.final_l_bn) || !std::isfinite(cell.pixel_std))
        throw NumericError("sweep: non-finite metric at lambda=" + std::to_string(lam) + " s_g=" + std::to_string(sg));
      cells.push_back(cell);
    }
  return cells;
}

}  // namespace ddis
