#include "ddis/classifier.hpp"

#include <cmath>

#include "ddis/ops.hpp"

namespace ddis {

ClassifierModel::ClassifierModel(ClassifierConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.widths.size() < 2) throw Error("classifier needs at least two batch-norm layers");
  std::int64_t size = config_.image_size;
  for (std::size_t i = 0; i < config_.widths.size(); ++i) {
    if (size % 2) throw Error("classifier: image size must stay even through every pooling stage");
    size /= 2;
  }
  Rng rng(seed);
  std::int64_t in = config_.in_channels;
  for (auto width : config_.widths) {
    conv_w_.push_back(init_conv(rng, width, in, 3));
    BatchNorm bn{Tensor({width}, 1.0), Tensor({width}, 0.0),
                 std::vector<double>(static_cast<std::size_t>(width), 0.0),
                 std::vector<double>(static_cast<std::size_t>(width), 1.0)};
    bns_.push_back(std::move(bn));
    in = width;
  }
  head_w_ = init_linear(rng, config_.num_classes, feature_width());
  head_b_ = Tensor({config_.num_classes}, 0.0);
}

std::int64_t ClassifierModel::feature_width() const {
  std::int64_t size = config_.image_size >> config_.widths.size();
  return config_.widths.back() * size * size;
}

ParameterList ClassifierModel::parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    const auto l = std::to_string(i);
    out.push_back({"conv" + l + ".weight", conv_w_[i]});
    out.push_back({"bn" + l + ".gamma", bns_[i].gamma});
    out.push_back({"bn" + l + ".beta", bns_[i].beta});
  }
  out.push_back({"head.weight", head_w_});
  out.push_back({"head.bias", head_b_});
  return out;
}

ClassifierModel::Output ClassifierModel::run(const Tensor& images, bool capture, bool training) {
  if (images.ndim() != 4 || images.dim(1) != config_.in_channels || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size)
    throw ShapeError("classifier_forward: expected [B," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.image_size) + "," + std::to_string(config_.image_size) +
                     "] images, got " + to_string(images.shape()));
  Output out;
  if (capture) out.stats.emplace();
  Tensor h = images;
  for (std::size_t l = 0; l < conv_w_.size(); ++l) {
    h = conv2d(h, conv_w_[l], Tensor(), 1, 1);
    const std::int64_t C = h.dim(1);
    auto& bn = bns_[l];
    const Shape bshape{1, C, 1, 1};
    Tensor normalized;
    if (training || capture) {
      Tensor mu = mean_axes(h, {0, 2, 3}, false);
      Tensor var = var_axes(h, {0, 2, 3}, false);
      if (capture) {
        out.stats->means.push_back(mu);
        out.stats->vars.push_back(var);
      }
      if (training) {
        Tensor inv_std = reshape(div(Tensor({C}, 1.0), sqrt(add_scalar(var, config_.bn_eps))), bshape);
        normalized = mul(sub(h, reshape(mu, bshape)), inv_std);
        const double m = config_.momentum;
        for (std::int64_t c = 0; c < C; ++c) {
          bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mu[c];
          bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * var[c];
        }
      }
    }
    if (!training) {
      std::vector<double> scale(static_cast<std::size_t>(C)), shift(static_cast<std::size_t>(C));
      for (std::int64_t c = 0; c < C; ++c) {
        scale[c] = 1.0 / std::sqrt(bn.running_var[c] + config_.bn_eps);
        shift[c] = -bn.running_mean[c] * scale[c];
      }
      normalized = add(mul(h, Tensor(bshape, scale)), Tensor(bshape, shift));
    }
    h = add(mul(normalized, reshape(bn.gamma, bshape)), reshape(bn.beta, bshape));
    h = max_pool2d(relu(h), 2);
  }
  if (training) initialized_ = true;
  out.features = reshape(h, {h.dim(0), -1});
  out.logits = linear(out.features, head_w_, head_b_);
  return out;
}

ClassifierModel::Output ClassifierModel::forward(const Tensor& images, bool capture) const {
  // run() only touches running statistics when training is set.
  return const_cast<ClassifierModel*>(this)->run(images, capture, false);
}

ClassifierModel::Output ClassifierModel::train_forward(const Tensor& images) { return run(images, false, true); }

ClassifierModel::Output classifier_forward(const ClassifierModel& model, const Tensor& images, bool capture) {
  return model.forward(images, capture);
}

FeatureStatistics running_statistics(const ClassifierModel& model) {
  if (!model.statistics_initialized()) throw Error("running_statistics: statistics uninitialized");
  FeatureStatistics s;
  for (const auto& bn : model.batch_norms()) {
    const auto C = static_cast<std::int64_t>(bn.running_mean.size());
    s.means.emplace_back(Shape{C}, bn.running_mean);
    s.vars.emplace_back(Shape{C}, bn.running_var);
  }
  return s;
}

}  // namespace ddis
