#include "ddis/class_token.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
using testing::randn;
using testing::tiny_classifier;

namespace {

struct Toy {
  DenoiserModel denoiser;
  Codec codec;
  ClassifierModel classifier;
  ConditioningVocabulary vocab;
  CatEngines engines;

  Toy()
      : denoiser(DenoiserConfig{1, 4, 4, 8, 8, 16, 16, 16, 1000}, 3),
        codec(CodecConfig{CodecKind::identity, 1, 4, 1, 1}, 0),
        classifier(tiny_classifier(4)),
        vocab({"<pad>", "a", "b", "c"}, 16, 9) {
    engines.denoiser = &denoiser;
    engines.codec = &codec;
    engines.classifier = &classifier;
    engines.vocab = &vocab;
    engines.label_ids = {1, 2, 3};
    // a mild guidance scale keeps the untrained toy away from the clamp
    engines.schedule = make_schedule(1000, 1e-4, 0.02, 4, SigmaMode::deterministic, 2.0);
  }
};

CatTrainConfig small_config() {
  CatTrainConfig c;
  c.accumulation = 4;
  c.max_epochs = 2;
  c.threshold = 1.0;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("prompt construction") {
  Toy toy;
  auto t0 = init_token(0, 1, toy.vocab, 1);
  auto t1 = init_token(1, 1, toy.vocab, 2);
  auto p = build_prompt(1, t0, toy.vocab);
  CHECK(p.length() == 2);
  CHECK(p.class_id == 0);
  Tensor cond = prompt_condition(p, t0, toy.vocab);
  CHECK(cond.shape() == Shape{2, 16});
  for (std::int64_t j = 0; j < 16; ++j) {
    CHECK(cond[j] == t0.vectors[j]);
    CHECK(cond[16 + j] == toy.vocab.table()[16 + j]);
  }
  CHECK_FALSE(bit_equal(t0.vectors, t1.vectors));
  CHECK(build_prompt(2, t1, toy.vocab).length() == 2);
  // the fresh row carries the vocabulary's scale
  double norm = 0.0;
  for (double v : t0.vectors.values()) norm += v * v;
  CHECK(std::sqrt(norm) == doctest::Approx(toy.vocab.mean_row_norm()).epsilon(1e-9));

  CHECK_THROWS_AS(build_prompt(9, t0, toy.vocab), Error);
  CHECK_THROWS_AS(build_prompt(ConditioningVocabulary::kPad, t0, toy.vocab), Error);
  CHECK_THROWS_AS(toy.engines.label_of(5), Error);
}

TEST_CASE("cross_entropy") {
  CHECK(cross_entropy(Tensor({2, 7}, 0.0), 3).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  Tensor peaked({1, 7}, 0.0);
  peaked.data()[0] = 10.0;
  const double want = std::log(1.0 + 6.0 * std::exp(-10.0));
  CHECK(cross_entropy(peaked, 0).item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(cross_entropy(peaked, 0).item() == doctest::Approx(9.06e-4).epsilon(1e-3));
  CHECK_THROWS(cross_entropy(peaked, 7));
  CHECK_THROWS(cross_entropy(peaked, -1));
  CHECK_THROWS_AS(cross_entropy(Tensor({7}, 0.0), 0), ShapeError);

  Tensor logits = randn({3, 5}, 4, 2.0);
  CHECK(finite_difference_check([](const Tensor& x) { return cross_entropy(x, 2); }, logits, 1e-5) < 1e-6);
  CHECK(finite_difference_check([](const Tensor& x) { return cross_entropy(x, std::vector<std::int64_t>{0, 4, 1}); },
                                logits, 1e-5) < 1e-6);
}

TEST_CASE("config validation") {
  CatTrainConfig c;
  CHECK(c.lr == 0.005);
  CHECK(c.max_epochs == 30);
  CHECK(c.accumulation == 20);
  CHECK(c.threshold == 0.7);
  CHECK(c.gradient_skip);
  c.validate();
  c.accumulation = 0;
  CHECK_THROWS(c.validate());
  c = CatTrainConfig{};
  c.threshold = 1.5;
  CHECK_THROWS(c.validate());
  c = CatTrainConfig{};
  c.unfreeze_denoiser = true;
  CHECK_THROWS(c.validate());
}

TEST_CASE("cat epoch") {
  Toy toy;
  auto cfg = small_config();
  const auto seeds = epoch_seeds(cfg, 0, 1);
  REQUIRE(seeds.size() == 4);
  CHECK(epoch_seeds(cfg, 0, 1) == seeds);
  CHECK(epoch_seeds(cfg, 0, 2) != seeds);
  CHECK(epoch_seeds(cfg, 1, 1) != seeds);
  CHECK_THROWS(cat_gradient(init_token(0, 1, toy.vocab, 1), toy.engines, cfg, std::span(seeds).first(3), nullptr));

  const auto before = frozen_hash(toy.engines);

  SUBCASE("lr 0 leaves the token alone") {
    auto tok = init_token(0, 1, toy.vocab, 1);
    const Tensor start = tok.vectors.clone();
    cfg.lr = 0.0;
    auto st = cat_epoch(tok, toy.engines, cfg, seeds);
    CHECK(bit_equal(tok.vectors, start));
    CHECK(std::isfinite(st.mean_ce));
    CHECK(st.correct_fraction >= 0.0);
    CHECK(st.correct_fraction <= 1.0);
  }
  SUBCASE("update moves only the token") {
    auto tok = init_token(0, 1, toy.vocab, 1);
    const Tensor start = tok.vectors.clone();
    cat_epoch(tok, toy.engines, cfg, seeds);
    CHECK_FALSE(bit_equal(tok.vectors, start));
    CHECK(tok.steps == 1);
  }
  SUBCASE("one trainable row of width d_e") {
    auto tok = init_token(0, 1, toy.vocab, 1);
    Tensor g = cat_gradient(tok, toy.engines, cfg, seeds, nullptr);
    CHECK(g.size() == toy.vocab.width());
    CHECK(tok.vectors.size() == toy.vocab.width());
    CHECK(init_token(0, 6, toy.vocab, 1).vectors.size() == 6 * toy.vocab.width());
  }
  SUBCASE("zero bn weight is the plain objective") {
    auto tok = init_token(1, 1, toy.vocab, 1);
    EpochStats a, b;
    Tensor ga = cat_gradient(tok, toy.engines, cfg, seeds, &a);
    cfg.bn_loss_weight = 0.0;
    Tensor gb = cat_gradient(tok, toy.engines, cfg, seeds, &b);
    CHECK(bit_equal(ga, gb));
    CHECK(a.mean_ce == b.mean_ce);
    cfg.bn_loss_weight = 0.5;
    Tensor gc = cat_gradient(tok, toy.engines, cfg, seeds, nullptr);
    CHECK_FALSE(bit_equal(ga, gc));
  }
  SUBCASE("gradient skip only sees the final step") {
    auto tok = init_token(2, 1, toy.vocab, 1);
    Tensor full = cat_gradient(tok, toy.engines, cfg, seeds, nullptr);
    CHECK_FALSE(bit_equal(full, Tensor(full.shape(), 0.0)));

    // latent entering the last step, recovered from a recorded guided run
    auto prompt = build_prompt(toy.engines.label_of(2), tok, toy.vocab);
    auto run = guided_sample(toy.denoiser, toy.codec, toy.classifier, toy.engines.schedule,
                             prompt_condition(prompt, tok, toy.vocab), toy.engines.dag, seeds);
    const Tensor z_last = run.trace.steps.back().z;
    Tensor replayed = cat_final_step_gradient(tok, toy.engines, cfg, z_last, seeds, nullptr);
    CHECK(bit_equal(full, replayed));

    // a different history that ends at the same latent gives the same gradient
    Tensor z_copy = z_last.clone();
    CHECK(bit_equal(cat_final_step_gradient(tok, toy.engines, cfg, z_copy, seeds, nullptr), full));

    // while the full tape differs
    cfg.gradient_skip = false;
    Tensor through = cat_gradient(tok, toy.engines, cfg, seeds, nullptr);
    CHECK_FALSE(bit_equal(through, full));
    CHECK(through.shape() == full.shape());
  }
  CHECK(frozen_hash(toy.engines) == before);
}

TEST_CASE("optimize_cat") {
  Toy toy;
  auto cfg = small_config();
  const auto before = frozen_hash(toy.engines);

  cfg.threshold = 0.0;
  auto once = optimize_cat(0, toy.engines, cfg);
  CHECK(once.log.size() == 1);
  CHECK(once.steps == 0);  // stopped before updating
  CHECK(bit_equal(once.vectors, init_token(0, 1, toy.vocab, cfg.seed).vectors));

  cfg.threshold = 1.0;
  cfg.max_epochs = 3;
  auto a = optimize_cat(1, toy.engines, cfg);
  auto b = optimize_cat(1, toy.engines, cfg);
  CHECK(bit_equal(a.vectors, b.vectors));
  CHECK(a.log.size() <= 3);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].epoch == static_cast<int>(i) + 1);
  CHECK(frozen_hash(toy.engines) == before);

  cfg.unfreeze_denoiser = true;
  CHECK_THROWS(optimize_cat(0, toy.engines, cfg));
}

TEST_CASE("synthesis reuses stored tokens") {
  Toy toy;
  auto cfg = small_config();
  cfg.max_epochs = 1;
  auto first = ddis_synthesize({0, 2}, toy.engines, cfg, 3, 77, {}, 2);
  CHECK(first.images.dim(0) == 6);
  CHECK(first.labels == std::vector<std::int64_t>{0, 0, 0, 2, 2, 2});
  CHECK(first.optimized == std::vector<int>{0, 2});
  auto again = ddis_synthesize({0, 2}, toy.engines, cfg, 3, 77, first.tokens, 2);
  CHECK(again.optimized.empty());
  CHECK(bit_equal(again.images, first.images));
}
