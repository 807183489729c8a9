#include "ddis/denoiser.hpp"
#include "ddis/evaluation.hpp"
#include "ddis/fixtures.hpp"
#include "ddis/guidance.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
using testing::randn;
using testing::tiny_classifier;

TEST_CASE("frechet distance") {
  Tensor a = randn({40, 3}, 1);
  Tensor b = randn({30, 3}, 2, 2.0);
  auto same = frechet_distance(a, a);
  CHECK(std::abs(same.distance) < 1e-8);
  CHECK_FALSE(same.shrunk);
  const double ab = frechet_distance(a, b).distance, ba = frechet_distance(b, a).distance;
  CHECK(ab == doctest::Approx(ba).epsilon(1e-9));
  CHECK(ab > 0.1);

  // closed form for diagonal Gaussians: |m1-m2|^2 + sum (s1 - s2)^2
  Tensor shifted = a.clone();
  for (std::int64_t i = 0; i < 40; ++i) shifted.data()[i * 3] += 2.0;
  CHECK(frechet_distance(a, shifted).distance == doctest::Approx(4.0).epsilon(1e-8));

  // a single row has no covariance to fit
  auto one = frechet_distance(Tensor({1, 3}, 0.5), a);
  CHECK(one.shrunk);
  CHECK(std::isfinite(one.distance));
}

TEST_CASE("metric report") {
  auto clf = tiny_classifier(2);
  Tensor x = testing::uniform({12, 1, 4, 4}, 3, -1, 1);
  std::vector<std::int64_t> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
  Tensor ref = penultimate_features(clf, testing::uniform({10, 1, 4, 4}, 4, -1, 1));
  auto r = metric_report(x, y, clf, ref);
  CHECK(r.images == 12);
  CHECK(r.class_confidence.size() == 3);
  CHECK(r.agreement >= 0.0);
  CHECK(std::isfinite(r.l_bn));

  Tensor p = softmax_probabilities(clf, x);
  for (std::int64_t i = 0; i < 12; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 3; ++j) s += p[i * 3 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  // reversed order
  std::vector<std::int64_t> order(12), y2(12);
  for (std::int64_t i = 0; i < 12; ++i) order[static_cast<std::size_t>(i)] = 11 - i;
  for (std::size_t i = 0; i < 12; ++i) y2[i] = y[static_cast<std::size_t>(order[i])];
  auto r2 = metric_report(take_rows(x, order), y2, clf, ref);
  CHECK(r2.agreement == r.agreement);
  CHECK(r2.mean_confidence == doctest::Approx(r.mean_confidence).epsilon(1e-12));
  CHECK(r2.feature_distance == doctest::Approx(r.feature_distance).epsilon(1e-8));
  CHECK(r2.l_bn == doctest::Approx(r.l_bn).epsilon(1e-10));
  for (std::size_t c = 0; c < 3; ++c) CHECK(r2.class_confidence[c] == doctest::Approx(r.class_confidence[c]).epsilon(1e-12));

  CHECK(metric_csv_row("x", r).find("x,") == 0);
  CHECK_FALSE(metric_csv_header(3).empty());
}

TEST_CASE("deep inversion baseline") {
  ClassifierConfig cc;
  cc.image_size = 16;
  cc.widths = {3, 4};
  cc.num_classes = 3;
  cc.momentum = 1.0;
  ClassifierModel clf(cc, 1);
  clf.train_forward(testing::uniform({8, 1, 16, 16}, 2, -1, 1));

  DiConfig cfg;
  cfg.batch = 4;
  cfg.iterations = 0;
  auto init = baseline_deep_inversion(clf, 1, cfg, 5);
  cfg.iterations = 1;
  std::vector<double> log;
  auto moved = baseline_deep_inversion(clf, 1, cfg, 5, &log);
  CHECK(init.shape() == moved.shape());
  CHECK_FALSE(bit_equal(init, moved));
  CHECK(bit_equal(init, baseline_deep_inversion(clf, 1, DiConfig{0, 0.05, 0.01, 4}, 5)));

  cfg.iterations = 40;
  cfg.lambda_bn = 0.0;
  log.clear();
  auto out = baseline_deep_inversion(clf, 1, cfg, 5, &log);
  REQUIRE(log.size() == 41);
  CHECK(log.back() < log.front());
  for (double v : out.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("bn stability study") {
  DenoiserModel d(DenoiserConfig{}, 2);
  ClassifierConfig cc;
  cc.image_size = 16;
  cc.widths = {3, 4};
  cc.momentum = 1.0;
  ClassifierModel clf(cc, 1);
  clf.train_forward(testing::uniform({8, 1, 16, 16}, 2, -1, 1));
  ConditioningVocabulary vocab({"<pad>", "a"}, 32, 1);
  auto s = make_schedule(1000, 1e-4, 0.02, 5);
  auto st = bn_stability_study(d, Codec{}, clf, s, vocab.embed({0, 1}), 8, 3);
  CHECK(st.steps.size() == 5);
  CHECK(st.layer_mean.size() == 5);
  CHECK(st.cv_mean.size() == 2);
  for (const auto& row : st.layer_mean)
    for (double v : row) CHECK(std::isfinite(v));
  for (const auto& row : st.layer_var)
    for (double v : row) CHECK(std::isfinite(v));
  // header plus one line per step, 2 stats per layer after the step columns
  auto csv = st.csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}
