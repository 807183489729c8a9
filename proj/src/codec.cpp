#include "ddis/codec.hpp"

#include <cmath>

#include "ddis/ops.hpp"

namespace ddis {

Codec::Codec(CodecConfig config, std::uint64_t seed) : config_(config) {
  if (config_.kind == CodecKind::identity) return;
  if (config_.size % 4 != 0) throw Error("codec: image side must be divisible by 4");
  Rng rng(seed);
  const auto& c = config_;
  e1_w_ = init_conv(rng, c.hidden, c.channels, 3);
  e1_b_ = Tensor({c.hidden}, 0.0);
  e2_w_ = init_conv(rng, c.latent_channels, c.hidden, 3);
  e2_b_ = Tensor({c.latent_channels}, 0.0);
  d1_w_ = init_conv_transpose(rng, c.latent_channels, c.hidden, 4);
  d1_b_ = Tensor({c.hidden}, 0.0);
  d2_w_ = init_conv_transpose(rng, c.hidden, c.channels, 4);
  d2_b_ = Tensor({c.channels}, 0.0);
}

Shape Codec::latent_shape() const {
  if (config_.kind == CodecKind::identity) return image_shape();
  return {config_.latent_channels, config_.size / 4, config_.size / 4};
}

void Codec::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw Error("codec: latent scale must be positive and finite");
  latent_scale_ = s;
}

void Codec::check(const Tensor& t, const Shape& item, const char* what) const {
  bool ok = t.ndim() == item.size() + 1;
  for (std::size_t i = 0; ok && i < item.size(); ++i) ok = t.dim(i + 1) == item[i];
  if (!ok) {
    Shape want{-1};
    want.insert(want.end(), item.begin(), item.end());
    throw ShapeError(std::string("codec ") + what + ": expected " + to_string(want) + " (batch first), got " +
                     to_string(t.shape()));
  }
}

Tensor Codec::encode(const Tensor& images) const {
  check(images, image_shape(), "encode");
  if (config_.kind == CodecKind::identity) return images;
  Tensor h = silu(conv2d(images, e1_w_, e1_b_, 2, 1));
  h = conv2d(h, e2_w_, e2_b_, 2, 1);
  return mul_scalar(h, latent_scale_);
}

Tensor Codec::decode(const Tensor& latents) const {
  check(latents, latent_shape(), "decode");
  if (config_.kind == CodecKind::identity) return latents;
  Tensor h = mul_scalar(latents, 1.0 / latent_scale_);
  h = silu(conv_transpose2d(h, d1_w_, d1_b_, 2, 1));
  return conv_transpose2d(h, d2_w_, d2_b_, 2, 1);
}

ParameterList Codec::parameters() const {
  if (config_.kind == CodecKind::identity) return {};
  return {{"enc1.w", e1_w_}, {"enc1.b", e1_b_}, {"enc2.w", e2_w_}, {"enc2.b", e2_b_},
          {"dec1.w", d1_w_}, {"dec1.b", d1_b_}, {"dec2.w", d2_w_}, {"dec2.b", d2_b_}};
}

}  // namespace ddis
