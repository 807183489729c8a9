#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/diffusion.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
using testing::randn;
using testing::tiny_classifier;
using testing::uniform;

TEST_CASE("classifier capture statistics") {
  auto m = tiny_classifier(1, 8, {3, 4, 5});
  Tensor one = uniform({1, 1, 8, 8}, 5, -1, 1);
  Tensor same = concat({one, one, one, one}, 0);
  auto out = classifier_forward(m, same, true);
  REQUIRE(out.stats);
  CHECK(out.stats->layers() == 3);
  // identical images: a channel's batch-and-spatial variance equals the spatial variance of one image
  auto single = classifier_forward(m, one, true);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::int64_t c = 0; c < out.stats->vars[l].size(); ++c)
      CHECK(out.stats->vars[l][c] == doctest::Approx(single.stats->vars[l][c]).epsilon(1e-12));

  auto p = softmax(classifier_forward(m, randn({3, 1, 8, 8}, 2), false).logits);
  for (std::int64_t b = 0; b < 3; ++b) {
    double s = 0;
    for (std::int64_t k = 0; k < 3; ++k) s += p[b * 3 + k];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(classifier_forward(m, Tensor({1, 2, 8, 8}), false), ShapeError);
}

TEST_CASE("running statistics") {
  ClassifierConfig c;
  c.image_size = 8;
  c.widths = {3, 4};
  ClassifierModel fresh(c, 1);
  CHECK_THROWS_WITH_AS(running_statistics(fresh), doctest::Contains("uninitialized"), Error);

  // momentum 1 folds exactly one batch; equals capture-mode statistics of that batch
  c.momentum = 1.0;
  ClassifierModel m(c, 2);
  Tensor batch = uniform({6, 1, 8, 8}, 3, -1, 1);
  m.train_forward(batch);
  auto running = running_statistics(m);
  auto captured = classifier_forward(m, batch, true).stats;
  for (std::size_t l = 0; l < running.layers(); ++l)
    for (std::int64_t k = 0; k < running.means[l].size(); ++k) {
      CHECK(std::abs(running.means[l][k] - captured->means[l][k]) < 1e-10);
      CHECK(std::abs(running.vars[l][k] - captured->vars[l][k]) < 1e-10);
    }
}

TEST_CASE("eval-mode forwards never touch running statistics") {
  auto m = tiny_classifier(4);
  const auto before = m.batch_norms();
  Tensor x = randn({2, 1, 4, 4}, 9);
  for (int i = 0; i < 1000; ++i) classifier_forward(m, x, i % 2 == 0);
  for (std::size_t l = 0; l < before.size(); ++l) {
    CHECK(before[l].running_mean == m.batch_norms()[l].running_mean);
    CHECK(before[l].running_var == m.batch_norms()[l].running_var);
  }
  for (const auto& bn : m.batch_norms())
    for (double v : bn.running_var) CHECK(v > 0.0);
}

TEST_CASE("head row permutation permutes logits") {
  auto m = tiny_classifier(6);
  Tensor x = randn({2, 1, 4, 4}, 10);
  auto before = classifier_forward(m, x, false).logits;
  auto params = m.parameters();
  Tensor* w = nullptr;
  Tensor* b = nullptr;
  for (auto& p : params) {
    if (p.name == "head.weight") w = &p.value;
    if (p.name == "head.bias") b = &p.value;
  }
  REQUIRE(w);
  REQUIRE(b);
  b->data()[0] = 0.3;  // make the bias visible in the permutation
  before = classifier_forward(m, x, false).logits;
  const std::vector<std::int64_t> perm{2, 0, 1};
  Tensor w0 = w->detach(), b0 = b->detach();
  const auto F = w->dim(1);
  for (std::int64_t k = 0; k < 3; ++k) {
    for (std::int64_t j = 0; j < F; ++j) w->data()[k * F + j] = w0[perm[k] * F + j];
    b->data()[k] = b0[perm[k]];
  }
  auto after = classifier_forward(m, x, false).logits;
  for (std::int64_t r = 0; r < 2; ++r)
    for (std::int64_t k = 0; k < 3; ++k) CHECK(after[r * 3 + k] == doctest::Approx(before[r * 3 + perm[k]]).epsilon(1e-14));
}

TEST_CASE("denoiser forward") {
  DenoiserModel d(DenoiserConfig{}, 3);
  ConditioningVocabulary vocab({"<pad>", "a", "b"}, 32, 5);
  Tensor z = randn({2, 1, 16, 16}, 1);
  auto e1 = denoiser_forward(d, vocab, z, 500, {});
  auto e2 = denoiser_forward(d, vocab, z, 500, {});
  CHECK(e1.shape() == z.shape());
  CHECK(bit_equal(e1, e2));
  CHECK(bit_equal(e1, denoiser_forward(d, z, 500, null_condition(2, 32))));
  CHECK_THROWS(denoiser_forward(d, vocab, z, 500, {1, 7}));
  CHECK_THROWS(denoiser_forward(d, z, 1000, null_condition(2, 32)));
  CHECK_THROWS_AS(denoiser_forward(d, Tensor({2, 1, 8, 8}), 10, null_condition(2, 32)), ShapeError);

  // CFG at s = 0 is the unconditional branch
  Tensor cond = vocab.embed({1, 2});
  auto uncond = d.forward(z, 100, null_condition(2, 32));
  CHECK(bit_equal(cfg_epsilon(d, z, 100, cond, 0.0), uncond));
}

TEST_CASE("vocabulary") {
  ConditioningVocabulary vocab({"<pad>", "a", "b"}, 8, 5);
  CHECK(vocab.id("b") == 2);
  CHECK_THROWS(vocab.id("zzz"));
  auto pad = vocab.embed({0});
  for (double v : pad.values()) CHECK(v == 0.0);
  CHECK_THROWS(vocab.embed({3}));
  CHECK(vocab.mean_row_norm() > 0.0);
}

TEST_CASE("attention re-weighting") {
  DenoiserModel d(DenoiserConfig{}, 3);
  ConditioningVocabulary vocab({"<pad>", "cat", "label"}, 32, 5);
  Tensor z = randn({1, 1, 16, 16}, 2);
  Tensor cond = vocab.embed({1, 2});
  AttentionProbe base_probe, w1_probe, w30_probe;
  auto base = d.forward(z, 300, cond, nullptr, &base_probe);
  auto same = attention_reweight(d, 0, 1.0).forward(z, 300, cond, &w1_probe);
  CHECK(bit_equal(base, same));
  attention_reweight(d, 0, 30.0).forward(z, 300, cond, &w30_probe);
  const auto Q = base_probe.weights.dim(1), L = base_probe.weights.dim(2);
  for (std::int64_t q = 0; q < Q; ++q) {
    CHECK(w30_probe.weights[q * L] > base_probe.weights[q * L]);
    double row = 0;
    for (std::int64_t l = 0; l < L; ++l) row += w30_probe.weights[q * L + l];
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
  CHECK_THROWS(attention_reweight(d, 0, 0.0));
  CHECK_THROWS(attention_reweight(d, 0, -1.0));
  CHECK_THROWS(attention_reweight(d, 5, 2.0).forward(z, 300, cond));
}

TEST_CASE("codecs") {
  Codec id;
  Tensor x = uniform({2, 1, 16, 16}, 3, -1, 1);
  CHECK(bit_equal(codec_decode(id, codec_encode(id, x)), x));

  Codec learned(CodecConfig{CodecKind::learned, 1, 16, 4, 8}, 7);
  auto z = learned.encode(x);
  CHECK(z.shape() == Shape{2, 4, 4, 4});
  CHECK(learned.decode(z).shape() == x.shape());
  CHECK_THROWS_AS(learned.decode(Tensor({2, 4, 8, 8})), ShapeError);
  CHECK_THROWS_AS(learned.encode(Tensor({2, 1, 8, 8})), ShapeError);

  auto fn = [&](const Tensor& v) { return sum(learned.decode(v)); };
  CHECK(finite_difference_check(fn, randn({1, 4, 4, 4}, 8), 1e-5) < 1e-4);
}
