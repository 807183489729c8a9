#include "ddis/denoiser.hpp"
#include "ddis/evaluation.hpp"
#include "ddis/guidance.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
using testing::randn;
using testing::tiny_classifier;

namespace {
FeatureStatistics stats(std::vector<std::vector<double>> means, std::vector<std::vector<double>> vars) {
  FeatureStatistics s;
  for (auto& m : means) s.means.push_back(Tensor({static_cast<std::int64_t>(m.size())}, m));
  for (auto& v : vars) s.vars.push_back(Tensor({static_cast<std::int64_t>(v.size())}, v));
  return s;
}
}  // namespace

TEST_CASE("bn_alignment_loss examples") {
  auto a = stats({{1, 2}, {3}}, {{1, 1}, {2}});
  CHECK(bn_alignment_loss(a, a).item() == 0.0);
  CHECK(bn_alignment_loss(stats({{3}}, {{4}}), stats({{0}}, {{0}})).item() == 7.0);
  CHECK(bn_alignment_loss(stats({{3, 4}, {0, 0}}, {{0, 0}, {0, 0}}), stats({{0, 0}, {0, 0}}, {{0, 0}, {0, 0}})).item() ==
        doctest::Approx(5.0).epsilon(1e-15));
  // squared ablation
  CHECK(bn_alignment_loss(stats({{3}}, {{4}}), stats({{0}}, {{0}}), true).item() == 25.0);
  CHECK_THROWS_AS(bn_alignment_loss(stats({{1}}, {{1}}), stats({{1, 2}}, {{1, 2}})), ShapeError);
  CHECK_THROWS_AS(bn_alignment_loss(stats({{1}}, {{1}}), stats({{1}, {1}}, {{1}, {1}})), ShapeError);
}

TEST_CASE("DagConfig") {
  DagConfig d;
  CHECK(d.eta() == 0.01 * 20.0);
  d.lambda_bn = -1;
  CHECK_THROWS(d.validate());
}

TEST_CASE("dag_correct") {
  auto clf = tiny_classifier(3);
  Codec id(CodecConfig{CodecKind::identity, 1, 4, 1, 1}, 0);
  const auto running = running_statistics(clf);
  Tensor z = randn({4, 1, 4, 4}, 5, 0.8);

  DagConfig off;
  off.lambda_bn = 0.0;
  auto same = dag_correct(z, clf, id, running, off);
  CHECK(bit_equal(same.z, z));

  DagConfig on;
  auto a = dag_correct(z, clf, id, running, on);
  auto b = dag_correct(z, clf, id, running, on);
  CHECK(bit_equal(a.z, b.z));
  CHECK(a.loss == b.loss);

  // gradient of L_BN(D(z)) against central differences
  auto fn = [&](const Tensor& v) { return image_bn_loss(clf, classifier_input(id.decode(v), on.knee), running); };
  CHECK(finite_difference_check(fn, z, 1e-5) < 1e-4);

  // one small step descends
  DagConfig small;
  small.lambda_bn = 1e-4;
  small.s_g = 1.0;
  auto step = dag_correct(z, clf, id, running, small);
  NoGradGuard guard;
  CHECK(fn(step.z).item() < fn(z).item());

  Tensor bad = z.detach();
  bad.data()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(dag_correct(bad, clf, id, running, on), NumericError);
}

TEST_CASE("DI baseline and DAG share one L_BN") {
  auto clf = tiny_classifier(8);
  const auto running = running_statistics(clf);
  Tensor x = randn({5, 1, 4, 4}, 2, 0.5);
  auto out = classifier_forward(clf, x, true);
  CHECK(image_bn_loss(clf, x, running).item() == bn_alignment_loss(*out.stats, running).item());
}

TEST_CASE("guided sampling with eta 0 is plain sampling") {
  DenoiserModel d(DenoiserConfig{}, 2);
  auto clf = tiny_classifier(1, 16, {3, 4});
  Codec id;
  auto s = make_schedule();
  ConditioningVocabulary vocab({"<pad>", "a"}, 32, 1);
  Tensor cond = vocab.embed({0, 1});
  std::vector<std::uint64_t> seeds{11, 12, 13};
  DagConfig off;
  off.lambda_bn = 0.0;
  auto g = guided_sample(d, id, clf, s, cond, off, seeds);
  auto p = sample(d, id, s, cond, seeds);
  CHECK(bit_equal(g.x0, p.x0));
  REQUIRE(g.trace.steps.size() == p.trace.steps.size());
  for (std::size_t i = 0; i < g.trace.steps.size(); ++i) CHECK(bit_equal(g.trace.steps[i].z, p.trace.steps[i].z));
  for (const auto& st : g.trace.steps) CHECK(st.has_l_bn);

  DagConfig on;
  auto h = guided_sample(d, id, clf, s, cond, on, seeds);
  CHECK_FALSE(bit_equal(h.x0, p.x0));
  for (const auto& st : h.trace.steps) CHECK(std::isfinite(st.l_bn));

  // apply_range restricts the correction to the listed timesteps
  DagConfig ranged;
  ranged.apply_range = {s.timesteps[30]};
  auto r = guided_sample(d, id, clf, s, cond, ranged, seeds);
  CHECK_FALSE(bit_equal(r.trace.steps[0].z_tilde, r.trace.steps[0].z));
  CHECK(bit_equal(r.trace.steps[1].z_tilde, r.trace.steps[1].z));
}

TEST_CASE("sweep grid emits finite cells") {
  DenoiserModel d(DenoiserConfig{}, 2);
  auto clf = tiny_classifier(1, 16, {3, 4});
  Codec id;
  auto s = make_schedule(1000, 1e-4, 0.02, 4);
  ConditioningVocabulary vocab({"<pad>", "a"}, 32, 1);
  std::vector<std::uint64_t> seeds{1, 2};
  auto cells = sweep_dag(d, id, clf, s, vocab.embed({0, 1}), {1e-4, 1e-2, 1.0}, {0.1, 100.0}, seeds);
  CHECK(cells.size() == 6);
  for (const auto& c : cells) {
    CHECK(c.eta == c.lambda_bn * c.s_g);
    CHECK(std::isfinite(c.final_l_bn));
    CHECK(std::isfinite(c.pixel_std));
  }
}
