#pragma once

#include <optional>
#include <vector>

#include "ddis/nn.hpp"
#include "ddis/tensor.hpp"

namespace ddis {

/// Per-BN-layer channel statistics. Batch statistics are tensors on the tape
/// so losses over them are differentiable; running statistics are constants.
struct FeatureStatistics {
  std::vector<Tensor> means;  // one [C_l] per BN layer
  std::vector<Tensor> vars;   // biased variance over batch and spatial axes
  std::size_t layers() const { return means.size(); }
};

struct ClassifierConfig {
  std::int64_t in_channels = 1;
  std::int64_t image_size = 16;
  std::vector<std::int64_t> widths{8, 16, 32};
  std::int64_t num_classes = 7;
  double momentum = 0.1;
  double bn_eps = 1e-5;
};

struct BatchNorm {
  Tensor gamma, beta;  // [C]
  std::vector<double> running_mean, running_var;
};

/// conv3x3 -> batch-norm -> relu -> maxpool2 blocks followed by a linear head.
class ClassifierModel {
 public:
  ClassifierModel(ClassifierConfig config, std::uint64_t seed);

  struct Output {
    Tensor logits;                           // [B, N]
    Tensor features;                         // [B, F] input of the head
    std::optional<FeatureStatistics> stats;  // pre-BN batch statistics
  };

  /// Eval mode: normalizes with running statistics, never mutates them.
  Output forward(const Tensor& images, bool capture = false) const;
  /// Train mode: normalizes with batch statistics and folds them into the running ones.
  Output train_forward(const Tensor& images);

  const ClassifierConfig& config() const { return config_; }
  bool statistics_initialized() const { return initialized_; }
  void set_statistics_initialized(bool on) { initialized_ = on; }
  std::size_t bn_layers() const { return bns_.size(); }
  std::vector<BatchNorm>& batch_norms() { return bns_; }
  const std::vector<BatchNorm>& batch_norms() const { return bns_; }

  ParameterList parameters() const;
  std::int64_t feature_width() const;

 private:
  Output run(const Tensor& images, bool capture, bool training);

  ClassifierConfig config_;
  std::vector<Tensor> conv_w_;
  std::vector<BatchNorm> bns_;
  Tensor head_w_, head_b_;
  bool initialized_ = false;
};

ClassifierModel::Output classifier_forward(const ClassifierModel& model, const Tensor& images, bool capture);

/// Stored running statistics; throws when the model was never trained.
FeatureStatistics running_statistics(const ClassifierModel& model);

}  // namespace ddis
