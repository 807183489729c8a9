#include "ddis/nn.hpp"

#include <cmath>
#include <cstring>

#include "ddis/hash.hpp"

namespace ddis {

Tensor init_conv(Rng& rng, std::int64_t out, std::int64_t in, std::int64_t k, double gain) {
  return rng.normal_tensor({out, in, k, k}, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
}

Tensor init_conv_transpose(Rng& rng, std::int64_t in, std::int64_t out, std::int64_t k, double gain) {
  return rng.normal_tensor({in, out, k, k}, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
}

Tensor init_linear(Rng& rng, std::int64_t out, std::int64_t in, double gain) {
  return rng.normal_tensor({out, in}, gain * std::sqrt(1.0 / static_cast<double>(in)));
}

void set_trainable(const ParameterList& params, bool on) {
  for (auto p : params) p.value.set_requires_grad(on);
}

void zero_grads(const ParameterList& params) {
  for (auto p : params) p.value.zero_grad();
}

std::string hash_parameters(const ParameterList& params) {
  Sha256 h;
  for (const auto& p : params) {
    h.update(p.name.data(), p.name.size());
    for (auto d : p.value.shape()) {
      const std::int64_t le = d;
      h.update(&le, sizeof le);
    }
    h.update(p.value.values().data(), p.value.values().size() * sizeof(double));
  }
  return h.hex();
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(static_cast<std::size_t>(params_[i].size()), 0.0);
    slots_[i].v.assign(static_cast<std::size_t>(params_[i].size()), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  double scale = 1.0;
  if (options_.grad_clip > 0.0) {
    double total = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (double g : p.impl().grad) total += g * g;
    total = std::sqrt(total);
    if (total > options_.grad_clip) scale = options_.grad_clip / total;
  }
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const auto& g = p.impl().grad;
    auto& s = slots_[i];
    auto values = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j] * scale;
      s.m[j] = options_.beta1 * s.m[j] + (1.0 - options_.beta1) * gj;
      s.v[j] = options_.beta2 * s.v[j] + (1.0 - options_.beta2) * gj * gj;
      const double mh = s.m[j] / bc1, vh = s.v[j] / bc2;
      values[j] -= options_.lr * mh / (std::sqrt(vh) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::restore(std::vector<AdamSlot> slots, long steps) {
  if (slots.size() != slots_.size()) throw Error("Adam::restore: slot count mismatch");
  slots_ = std::move(slots);
  steps_ = steps;
}

}  // namespace ddis
