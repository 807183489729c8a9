#include "ddis/class_token.hpp"

#include <cmath>
#include <stdexcept>

#include "ddis/hash.hpp"
#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

void CatTrainConfig::validate() const {
  if (!(lr >= 0.0)) throw Error("CAT: learning rate must be >= 0");
  if (max_epochs < 1) throw Error("CAT: need at least one epoch");
  if (accumulation < 1) throw Error("CAT: accumulation must be >= 1");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error("CAT: early-stop threshold must lie in [0, 1]");
  if (extra_token_count < 0) throw Error("CAT: extra_token_count must be >= 0");
  if (!std::isfinite(bn_loss_weight)) throw Error("CAT: bn loss weight must be finite");
  if (unfreeze_denoiser)
    throw Error("CAT ablation unfreeze_denoiser: fine-tuning the frozen denoiser is not supported; "
                "only the token embedding is optimized");
}

std::int64_t CatEngines::label_of(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= label_ids.size())
    throw Error("class id " + std::to_string(class_id) + " has no label token");
  return label_ids[static_cast<std::size_t>(class_id)];
}

PromptSpec build_prompt(std::int64_t label_id, const TokenEmbedding& cat, const ConditioningVocabulary& vocab) {
  if (!vocab.contains(label_id) || label_id == ConditioningVocabulary::kPad)
    throw Error("build_prompt: label token " + std::to_string(label_id) + " is not in the vocabulary");
  if (cat.vectors.ndim() != 2 || cat.width() != vocab.width())
    throw ShapeError("build_prompt: CAT rows " + to_string(cat.vectors.shape()) + " do not match embedding width " +
                     std::to_string(vocab.width()));
  return PromptSpec{cat.class_id, label_id, cat.token_count()};
}

Tensor prompt_condition(const PromptSpec& prompt, const TokenEmbedding& cat, const ConditioningVocabulary& vocab) {
  return concat({cat.vectors, vocab.embed({prompt.label_id})}, 0);
}

Tensor cross_entropy(const Tensor& logits, int c) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [B, N], got " + to_string(logits.shape()));
  if (c < 0 || c >= logits.dim(1))
    throw Error("cross_entropy: class " + std::to_string(c) + " outside [0, " + std::to_string(logits.dim(1)) + ")");
  return cross_entropy(logits, std::vector<std::int64_t>(static_cast<std::size_t>(logits.dim(0)), c));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [B, N], got " + to_string(logits.shape()));
  if (logits.dim(1) < 2) throw Error("cross_entropy: need at least two classes");
  if (static_cast<std::int64_t>(targets.size()) != logits.dim(0))
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.dim(0)) + " rows");
  for (auto t : targets)
    if (t < 0 || t >= logits.dim(1)) throw Error("cross_entropy: target " + std::to_string(t) + " out of range");
  return neg(mean(pick(log_softmax(logits), targets)));
}

TokenEmbedding init_token(int class_id, std::int64_t count, const ConditioningVocabulary& vocab, std::uint64_t seed) {
  TokenEmbedding cat;
  cat.class_id = class_id;
  Rng rng(mix_seed(seed, 0x70CE0000ULL + static_cast<std::uint64_t>(class_id)));
  cat.vectors = rng.normal_tensor({count, vocab.width()});
  const double target = vocab.mean_row_norm();
  for (std::int64_t r = 0; r < count; ++r) {
    double n = 0.0;
    for (std::int64_t j = 0; j < vocab.width(); ++j) n += cat.vectors[r * vocab.width() + j] * cat.vectors[r * vocab.width() + j];
    n = std::sqrt(n);
    for (std::int64_t j = 0; j < vocab.width(); ++j) cat.vectors.data()[r * vocab.width() + j] *= target / n;
  }
  return cat;
}

std::vector<std::uint64_t> epoch_seeds(const CatTrainConfig& config, int class_id, int epoch) {
  const auto n = static_cast<std::size_t>(config.accumulation);
  return seed_stream(mix_seed(config.seed, 0xCA70000ULL + static_cast<std::uint64_t>(class_id)), n,
                     static_cast<std::uint64_t>(epoch - 1) * n);
}

namespace {

void check_engines(const CatEngines& e) {
  if (!e.denoiser || !e.codec || !e.classifier || !e.vocab) throw Error("CAT: engines incomplete");
}

// CE (plus optional L_BN) of decoded final latents; fills stats.
Tensor objective(const Tensor& z0, int class_id, const CatEngines& engines, const CatTrainConfig& config,
                 EpochStats* stats) {
  Tensor x = classifier_input(engines.codec->decode(z0), engines.dag.knee);
  const bool with_bn = config.bn_loss_weight != 0.0;
  auto out = engines.classifier->forward(x, with_bn);
  Tensor loss = cross_entropy(out.logits, class_id);
  if (stats != nullptr) {
    stats->mean_ce = loss.item();
    const auto n = out.logits.dim(0), k = out.logits.dim(1);
    std::int64_t correct = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j)
        if (out.logits[b * k + j] > out.logits[b * k + best]) best = j;
      correct += best == class_id;
    }
    stats->correct_fraction = static_cast<double>(correct) / static_cast<double>(n);
  }
  if (with_bn)
    loss = add(loss, mul_scalar(bn_alignment_loss(*out.stats, running_statistics(*engines.classifier), engines.dag.squared),
                                config.bn_loss_weight));
  return loss;
}

Tensor leaf_rows(const TokenEmbedding& cat) {
  Tensor v = cat.vectors.detach();
  v.set_requires_grad(true);
  return v;
}

Tensor finish(const Tensor& loss, const Tensor& v) {
  if (!std::isfinite(loss.item())) throw NumericError("CAT: non-finite loss");
  backward(loss);
  Tensor g = v.grad();
  if (!is_finite(g)) throw NumericError("CAT: non-finite token gradient");
  return g;
}

}  // namespace

Tensor cat_prefix(const TokenEmbedding& cat, const CatEngines& engines, std::span<const std::uint64_t> seeds) {
  check_engines(engines);
  NoGradGuard guard;
  auto prompt = build_prompt(engines.label_of(cat.class_id), cat, *engines.vocab);
  Tensor cond = prompt_condition(prompt, cat, *engines.vocab);
  SamplerOptions options;
  options.record = false;
  options.corrector = make_dag_corrector(*engines.classifier, *engines.codec,
                                         running_statistics(*engines.classifier), engines.dag);
  Tensor z = initial_latent(engines.codec->latent_shape(), seeds);
  return run_reverse(epsilon_of(*engines.denoiser), engines.schedule, cond, z, engines.schedule.steps(), 1, seeds,
                     options, nullptr);
}

Tensor cat_final_step_gradient(const TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                               const Tensor& z_last, std::span<const std::uint64_t> seeds, EpochStats* stats) {
  check_engines(engines);
  EnableGradGuard grad_on;
  Tensor v = leaf_rows(cat);
  TokenEmbedding live = cat;
  live.vectors = v;
  auto prompt = build_prompt(engines.label_of(cat.class_id), cat, *engines.vocab);
  Tensor cond = prompt_condition(prompt, live, *engines.vocab);
  SamplerOptions options;
  options.record = false;
  options.corrector = make_dag_corrector(*engines.classifier, *engines.codec,
                                         running_statistics(*engines.classifier), engines.dag);
  Tensor z0 = reverse_step(epsilon_of(*engines.denoiser), engines.schedule, cond, z_last.detach(), 1, seeds, options,
                           nullptr);
  return finish(objective(z0, cat.class_id, engines, config, stats), v);
}

Tensor cat_gradient(const TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                    std::span<const std::uint64_t> seeds, EpochStats* stats) {
  config.validate();
  check_engines(engines);
  if (static_cast<int>(seeds.size()) != config.accumulation)
    throw Error("cat_epoch: " + std::to_string(seeds.size()) + " seeds for accumulation " +
                std::to_string(config.accumulation));
  if (config.gradient_skip) {
    Tensor z_last = cat_prefix(cat, engines, seeds);
    return cat_final_step_gradient(cat, engines, config, z_last, seeds, stats);
  }
  // Full tape through every step; DAG corrections enter as constants.
  EnableGradGuard grad_on;
  Tensor v = leaf_rows(cat);
  TokenEmbedding live = cat;
  live.vectors = v;
  auto prompt = build_prompt(engines.label_of(cat.class_id), cat, *engines.vocab);
  Tensor cond = prompt_condition(prompt, live, *engines.vocab);
  SamplerOptions options;
  options.record = false;
  options.corrector = make_dag_corrector(*engines.classifier, *engines.codec,
                                         running_statistics(*engines.classifier), engines.dag);
  Tensor z = initial_latent(engines.codec->latent_shape(), seeds);
  z = run_reverse(epsilon_of(*engines.denoiser), engines.schedule, cond, z, engines.schedule.steps(), 0, seeds,
                  options, nullptr);
  return finish(objective(z, cat.class_id, engines, config, stats), v);
}

void apply_cat_update(TokenEmbedding& cat, const Tensor& grad, const CatTrainConfig& config) {
  if (grad.shape() != cat.vectors.shape()) throw ShapeError("CAT update: gradient shape mismatch");
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam({cat.vectors}, opts);
  if (cat.steps > 0) adam.restore({cat.moments}, cat.steps);
  cat.vectors.zero_grad();
  auto& buf = grad_buffer(cat.vectors);
  std::copy(grad.data().begin(), grad.data().end(), buf.begin());
  adam.step();
  cat.vectors.zero_grad();
  cat.moments = adam.slots().front();
  cat.steps = adam.steps();
  if (!is_finite(cat.vectors)) throw NumericError("CAT: non-finite token after update");
}

EpochStats cat_epoch(TokenEmbedding& cat, const CatEngines& engines, const CatTrainConfig& config,
                     std::span<const std::uint64_t> seeds) {
  EpochStats stats;
  Tensor g = cat_gradient(cat, engines, config, seeds, &stats);
  apply_cat_update(cat, g, config);
  return stats;
}

std::string frozen_hash(const CatEngines& engines) {
  check_engines(engines);
  Sha256 h;
  h.update(hash_parameters(engines.denoiser->parameters()));
  h.update(hash_parameters(engines.codec->parameters()));
  h.update(hash_parameters(engines.classifier->parameters()));
  for (const auto& bn : engines.classifier->batch_norms()) {
    h.update(bn.running_mean.data(), bn.running_mean.size() * sizeof(double));
    h.update(bn.running_var.data(), bn.running_var.size() * sizeof(double));
  }
  h.update(hash_parameters({{"vocab", engines.vocab->table()}}));
  return h.hex();
}

TokenEmbedding optimize_cat(int class_id, const CatEngines& engines, const CatTrainConfig& config) {
  config.validate();
  engines.label_of(class_id);
  const std::string before = frozen_hash(engines);
  TokenEmbedding cat = init_token(class_id, 1 + config.extra_token_count, *engines.vocab, config.seed);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    auto seeds = epoch_seeds(config, class_id, epoch);
    EpochStats stats;
    Tensor g = cat_gradient(cat, engines, config, seeds, &stats);
    stats.epoch = epoch;
    cat.log.push_back(stats);
    if (stats.correct_fraction >= config.threshold) break;
    apply_cat_update(cat, g, config);
  }
  if (frozen_hash(engines) != before) throw std::logic_error("CAT optimization modified a frozen network");
  return cat;
}

SynthesisResult ddis_synthesize(const std::vector<int>& classes, const CatEngines& engines,
                                const CatTrainConfig& config, std::size_t per_class, std::uint64_t seed,
                                std::map<int, TokenEmbedding> tokens, std::size_t batch) {
  check_engines(engines);
  if (batch == 0) throw Error("synthesize: batch must be >= 1");
  SynthesisResult res;
  std::vector<Tensor> parts;
  for (int c : classes) {
    if (!tokens.count(c)) {
      tokens[c] = optimize_cat(c, engines, config);
      res.optimized.push_back(c);
    }
    const auto& cat = tokens.at(c);
    if (cat.class_id != c) throw Error("synthesize: token for class " + std::to_string(c) + " is labelled otherwise");
    Tensor cond;
    {
      NoGradGuard guard;
      cond = prompt_condition(build_prompt(engines.label_of(c), cat, *engines.vocab), cat, *engines.vocab);
    }
    auto seeds = seed_stream(mix_seed(seed, 0x5A70000ULL + static_cast<std::uint64_t>(c)), per_class);
    for (std::size_t start = 0; start < per_class; start += batch) {
      const std::size_t n = std::min(batch, per_class - start);
      std::span<const std::uint64_t> chunk(seeds.data() + start, n);
      auto out = guided_sample(*engines.denoiser, *engines.codec, *engines.classifier, engines.schedule, cond,
                               engines.dag, chunk);
      NoGradGuard guard;
      parts.push_back(classifier_input(out.x0, engines.dag.knee));
      for (auto sd : chunk) {
        res.labels.push_back(c);
        res.entries.push_back({c, sd});
      }
    }
  }
  res.images = parts.empty() ? Tensor() : concat(parts, 0);
  res.tokens = std::move(tokens);
  return res;
}

}  // namespace ddis
