#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ddis/nn.hpp"
#include "ddis/tensor.hpp"

namespace ddis {

/// Token table standing in for a text encoder. Row 0 is the all-zero padding
/// token that also makes up the null condition.
class ConditioningVocabulary {
 public:
  static constexpr std::int64_t kPad = 0;

  ConditioningVocabulary() = default;
  /// Rows are N(0, scale^2) per coordinate; scale <= 0 means 1/sqrt(width).
  ConditioningVocabulary(std::vector<std::string> tokens, std::int64_t width, std::uint64_t seed, double scale = 0.0);

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  std::int64_t width() const { return table_.dim(1); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// Throws if the token is unknown.
  std::int64_t id(const std::string& token) const;
  bool contains(std::int64_t id) const { return id >= 0 && id < size(); }

  /// [L, d_e] rows for the given ids; throws on ids outside the vocabulary.
  Tensor embed(const std::vector<std::int64_t>& ids) const;
  /// Mean Euclidean norm of the non-padding rows.
  double mean_row_norm() const;

  Tensor& table() { return table_; }
  const Tensor& table() const { return table_; }

 private:
  std::vector<std::string> tokens_;
  Tensor table_;
};

struct DenoiserConfig {
  std::int64_t channels = 1;  // latent channels
  std::int64_t size = 16;     // latent side, divisible by 4
  std::int64_t base = 8;
  std::int64_t mid = 16;
  std::int64_t deep = 32;
  std::int64_t embed_dim = 32;  // conditioning token width d_e
  std::int64_t time_dim = 32;
  std::int64_t attn_dim = 32;
  int train_steps = 1000;
};

/// Re-weights the cross-attention column of one token by `weight` and renormalizes rows.
struct AttentionHook {
  std::int64_t token_index = 0;
  double weight = 1.0;
};

/// Receives the bottleneck cross-attention maps [B, queries, L] of a forward pass.
struct AttentionProbe {
  Tensor weights;
};

/// Small U-shaped noise predictor: two resolution levels, sinusoidal timestep
/// embedding and one cross-attention block at the bottleneck.
class DenoiserModel {
 public:
  DenoiserModel(DenoiserConfig config, std::uint64_t seed);

  /// cond: [L, d_e] shared across the batch or [B, L, d_e].
  Tensor forward(const Tensor& z, int t, const Tensor& cond, const AttentionHook* hook = nullptr,
                 AttentionProbe* probe = nullptr) const;
  /// Per-sample timesteps (used in training).
  Tensor forward(const Tensor& z, const std::vector<int>& t, const Tensor& cond,
                 const AttentionHook* hook = nullptr, AttentionProbe* probe = nullptr) const;

  const DenoiserConfig& config() const { return config_; }
  Shape latent_shape() const { return {config_.channels, config_.size, config_.size}; }
  ParameterList parameters() const;

 private:
  struct ResBlock {
    Tensor w1, b1, w2, b2, temb_w, temb_b;
  };
  Tensor res_block(const ResBlock& rb, const Tensor& x, const Tensor& temb) const;
  ResBlock make_block(Rng& rng, std::int64_t ch);

  DenoiserConfig config_;
  Tensor t_w1_, t_b1_, t_w2_, t_b2_;
  Tensor in_w_, in_b_;
  ResBlock r1_, r2_, r3_, r4_, r5_;
  Tensor d1_w_, d1_b_, d2_w_, d2_b_;
  Tensor u1_w_, u1_b_, u2_w_, u2_b_;
  Tensor q_w_, k_w_, v_w_, o_w_;
  Tensor out_w_, out_b_;
};

/// The null condition: an all-zero token sequence of the given length.
Tensor null_condition(std::int64_t length, std::int64_t width);

/// Denoiser with a re-weighted cross-attention column; the base model is untouched.
class DenoiserView {
 public:
  DenoiserView(const DenoiserModel& base, AttentionHook hook) : base_(&base), hook_(hook) {}
  Tensor forward(const Tensor& z, int t, const Tensor& cond, AttentionProbe* probe = nullptr) const {
    return base_->forward(z, t, cond, &hook_, probe);
  }
  const DenoiserModel& base() const { return *base_; }
  const AttentionHook& hook() const { return hook_; }

 private:
  const DenoiserModel* base_;
  AttentionHook hook_;
};

DenoiserView attention_reweight(const DenoiserModel& model, std::int64_t token_index, double weight);

Tensor denoiser_forward(const DenoiserModel& model, const Tensor& z, int t, const Tensor& cond);
/// Token-id form; an empty id list means the null condition (two padding slots).
Tensor denoiser_forward(const DenoiserModel& model, const ConditioningVocabulary& vocab, const Tensor& z, int t,
                        const std::vector<std::int64_t>& ids);

/// Sinusoidal embedding [B, dim] of integer timesteps.
Tensor timestep_embedding(const std::vector<int>& t, std::int64_t dim);

}  // namespace ddis
