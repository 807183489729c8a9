#pragma once

#include "ddis/nn.hpp"
#include "ddis/tensor.hpp"

namespace ddis {

enum class CodecKind { identity, learned };

struct CodecConfig {
  CodecKind kind = CodecKind::identity;
  std::int64_t channels = 1;
  std::int64_t size = 16;
  std::int64_t latent_channels = 8;
  std::int64_t hidden = 16;
};

/// Image <-> latent maps. The learned variant downsamples by 4 per side.
class Codec {
 public:
  Codec() = default;
  Codec(CodecConfig config, std::uint64_t seed);

  Tensor encode(const Tensor& images) const;
  Tensor decode(const Tensor& latents) const;

  CodecKind kind() const { return config_.kind; }
  const CodecConfig& config() const { return config_; }
  Shape image_shape() const { return {config_.channels, config_.size, config_.size}; }
  Shape latent_shape() const;
  ParameterList parameters() const;

  /// Multiplier applied after encoding (divided out before decoding) so latents
  /// have roughly unit variance.
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s);

 private:
  void check(const Tensor& t, const Shape& item, const char* what) const;

  CodecConfig config_;
  double latent_scale_ = 1.0;
  Tensor e1_w_, e1_b_, e2_w_, e2_b_;
  Tensor d1_w_, d1_b_, d2_w_, d2_b_;
};

inline Tensor codec_encode(const Codec& codec, const Tensor& images) { return codec.encode(images); }
inline Tensor codec_decode(const Codec& codec, const Tensor& latents) { return codec.decode(latents); }

}  // namespace ddis
