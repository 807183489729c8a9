#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddis/classifier.hpp"
#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/diffusion.hpp"

namespace ddis {

/// Penultimate (head input) features, evaluated in chunks without a tape.
Tensor penultimate_features(const ClassifierModel& model, const Tensor& images, std::size_t chunk = 256);

struct FrechetResult {
  double distance = 0.0;
  bool shrunk = false;  // diagonal +1e-6 applied to a degenerate covariance
};

/// Frechet distance between Gaussian fits of two feature sets [n, F].
FrechetResult frechet_distance(const Tensor& a, const Tensor& b);

struct MetricReport {
  std::vector<double> class_confidence;  // mean softmax probability of the label, per class (NaN if absent)
  double mean_confidence = 0.0;
  double agreement = 0.0;  // top-1 == label
  double feature_distance = 0.0;
  bool shrunk = false;
  double l_bn = 0.0;  // L_BN of the whole set against running statistics
  std::size_t images = 0;
};

MetricReport metric_report(const Tensor& images, const std::vector<std::int64_t>& labels,
                           const ClassifierModel& classifier, const Tensor& reference_features);

std::string metric_csv_header(std::size_t classes);
std::string metric_csv_row(const std::string& tag, const MetricReport& r);

/// Per-image softmax rows [n, N] (no tape).
Tensor softmax_probabilities(const ClassifierModel& classifier, const Tensor& images);

struct DiConfig {
  int iterations = 200;
  double lr = 0.05;
  double lambda_bn = 0.01;
  std::size_t batch = 64;
};

/// Pixel-space inversion of CE + lambda L_BN from a noise start, clipped to [-1, 1].
/// `ce_log` receives the CE before each iteration and after the last.
Tensor baseline_deep_inversion(const ClassifierModel& classifier, int class_id, const DiConfig& config,
                               std::uint64_t seed, std::vector<double>* ce_log = nullptr);

struct BnStabilityStudy {
  std::vector<int> steps, timesteps;
  std::vector<std::vector<double>> layer_mean;  // [step][layer] channel-averaged batch mean
  std::vector<std::vector<double>> layer_var;   // [step][layer] channel-averaged batch variance
  std::vector<double> cv_mean, cv_var;          // per layer, across timesteps
  std::string csv() const;
  std::string summary_csv() const;
};

BnStabilityStudy bn_stability_study(const DenoiserModel& denoiser, const Codec& codec,
                                    const ClassifierModel& classifier, const NoiseSchedule& s, const Tensor& cond,
                                    std::size_t n, std::uint64_t seed);

struct KdConfig {
  double temperature = 4.0;
  int epochs = 30;
  std::size_t batch = 64;
  double lr = 3e-3;
  bool hard_labels = false;  // plain CE on the given labels instead of soft targets
};

struct KdResult {
  std::string teacher, student, source;
  double accuracy = 0.0;
};

/// Trains a fresh student on the teacher's temperature-softened outputs over `images`.
KdResult dfkd_train_student(const ClassifierModel& teacher, const ClassifierConfig& student, const Tensor& images,
                            const KdConfig& config, const Tensor& eval_images,
                            const std::vector<std::int64_t>& eval_labels, std::uint64_t seed,
                            const std::string& source, const std::vector<std::int64_t>* labels = nullptr);

}  // namespace ddis
