#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "ddis/classifier.hpp"
#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/diffusion.hpp"
#include "ddis/guidance.hpp"
#include "ddis/nn.hpp"

namespace ddis {

struct EpochStats {
  int epoch = 0;
  double mean_ce = 0.0;
  double correct_fraction = 0.0;
};

/// Learnable token rows v_c ([k, d_e], k = 1 by default) plus optimizer state.
struct TokenEmbedding {
  int class_id = 0;
  Tensor vectors;
  AdamSlot moments;
  long steps = 0;
  std::vector<EpochStats> log;

  std::int64_t token_count() const { return vectors.dim(0); }
  std::int64_t width() const { return vectors.dim(1); }
};

struct PromptSpec {
  int class_id = 0;
  std::int64_t label_id = 0;
  std::int64_t cat_tokens = 1;  // CAT slots placed before the label
  std::size_t length() const { return static_cast<std::size_t>(cat_tokens) + 1; }
};

struct CatTrainConfig {
  double lr = 0.005;
  int max_epochs = 30;
  int accumulation = 20;  // seeds per epoch, evaluated as one batch
  double threshold = 0.7;
  bool gradient_skip = true;
  int extra_token_count = 0;  // additional CAT rows (ablation)
  double bn_loss_weight = 0.0;  // ablation: adds weight * L_BN to the CE objective when nonzero
  bool unfreeze_denoiser = false;  // ablation: rejected
  std::uint64_t seed = 0;

  void validate() const;
};

/// Frozen networks and sampling setup shared by CAT optimization and synthesis.
struct CatEngines {
  const DenoiserModel* denoiser = nullptr;
  const Codec* codec = nullptr;
  const ClassifierModel* classifier = nullptr;
  const ConditioningVocabulary* vocab = nullptr;
  std::vector<std::int64_t> label_ids;  // label token id per class
  NoiseSchedule schedule;
  DagConfig dag;

  std::int64_t label_of(int class_id) const;
};

PromptSpec build_prompt(std::int64_t label_id, const TokenEmbedding& cat, const ConditioningVocabulary& vocab);

/// [k+1, d_e] condition: CAT rows (on the tape when they require grad) then the label row.
Tensor prompt_condition(const PromptSpec& prompt, const TokenEmbedding& cat, const ConditioningVocabulary& vocab);

/// -mean_b log softmax(logits)_b[c].
Tensor cross_entropy(const Tensor& logits, int c);
/// Per-sample targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

/// Fresh CAT rows scaled to the mean vocabulary row norm.
TokenEmbedding init_token(int class_id, std::int64_t count, const ConditioningVocabulary& vocab, std::uint64_t seed);

/// Seeds of epoch `epoch` (1-based) for class c.
std::vector<std::uint64_t> epoch_seeds(const CatTrainConfig& config, int class_id, int epoch);

/// Runs the no-grad sampling prefix down to the latent entering the final step.
Tensor cat_prefix(const TokenEmbedding& cat, const CatEngines& engines, std::span<const std::uint64_t> seeds);

/// Loss gradient with respect to the CAT rows through the final step only,
/// given the latent entering that step. Fills the epoch statistics.
Tensor cat_final_step_gradient(const TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                               const Tensor& z_last, std::span<const std::uint64_t> seeds, EpochStats* stats);

/// Gradient and statistics for one epoch; no update.
Tensor cat_gradient(const TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                    std::span<const std::uint64_t> seeds, EpochStats* stats);

/// One Adam update of the CAT rows from a precomputed gradient.
void apply_cat_update(TokenEmbedding& cat, const Tensor& grad, const CatTrainConfig& config);

/// Gradient, then one update. Returns the statistics measured before the update.
EpochStats cat_epoch(TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                     std::span<const std::uint64_t> seeds);

/// Epoch loop with early stopping: stops (without updating) at the first epoch
/// whose correct-fraction reaches the threshold.
TokenEmbedding optimize_cat(int class_id, const CatEngines& engines, const CatTrainConfig& config);

struct SynthEntry {
  int class_id;
  std::uint64_t seed;
};

struct SynthesisResult {
  Tensor images;  // [n, C, H, W], decoded and mapped into the classifier range
  std::vector<std::int64_t> labels;
  std::vector<SynthEntry> entries;
  std::map<int, TokenEmbedding> tokens;
  std::vector<int> optimized;  // classes whose CAT was optimized in this call
};

/// Per-class token optimization then guided sampling; classes already present in `tokens` skip optimization.
SynthesisResult ddis_synthesize(const std::vector<int>& classes, const CatEngines& engines,
                                const CatTrainConfig& config, std::size_t per_class, std::uint64_t seed,
                                std::map<int, TokenEmbedding> tokens = {}, std::size_t batch = 32);

/// SHA-256 over the frozen networks and vocabulary; used to assert the frozen contract.
std::string frozen_hash(const CatEngines& engines);

}  // namespace ddis
