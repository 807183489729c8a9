#include "ddis/checkpoint.hpp"
#include "ddis/fixtures.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;

TEST_CASE("datasets") {
  auto a = generate_dataset(Domain::filled, 5, 42);
  auto b = generate_dataset(Domain::filled, 5, 42);
  CHECK(bit_equal(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != generate_dataset(Domain::filled, 5, 43).hash());
  CHECK(a.hash() != generate_dataset(Domain::outline, 5, 42).hash());
  CHECK(a.images.shape() == Shape{35, 1, 16, 16});
  for (double v : a.images.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  std::vector<int> count(7, 0);
  for (auto l : a.labels) ++count[static_cast<std::size_t>(l)];
  for (int c : count) CHECK(c == 5);

  CHECK(shape_classes().size() == 7);
  CHECK(generate_dataset(Domain::outline, 400, 1).size() == 2800);
  CHECK(parse_domain(domain_name(Domain::outline)) == Domain::outline);
  CHECK_THROWS(parse_domain("sketch"));
}

TEST_CASE("domains differ in tone") {
  auto f = generate_dataset(Domain::filled, 3, 2);
  auto o = generate_dataset(Domain::outline, 3, 2);
  // background corner pixel
  CHECK(f.images[0] < 0.0);
  CHECK(o.images[0] > 0.0);
}

TEST_CASE("classifier training") {
  auto data = generate_dataset(Domain::outline, 6, 3);
  ClassifierTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 42;
  cfg.model.widths = {4, 8};
  auto a = train_classifier(data, cfg, 1);
  auto b = train_classifier(data, cfg, 2);
  CHECK(a.statistics_initialized());
  CHECK(hash_parameters(a.parameters()) != hash_parameters(b.parameters()));
  CHECK(hash_parameters(a.parameters()) == hash_parameters(train_classifier(data, cfg, 1).parameters()));
  const double acc = classifier_accuracy(a, data.images, data.labels);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);

  // one batch at momentum 1: running statistics are that batch's statistics
  cfg.batch = 42;
  cfg.model.momentum = 1.0;
  auto m = train_classifier(data, cfg, 5);
  CHECK(m.statistics_initialized());
}

TEST_CASE("denoiser training") {
  auto data = generate_dataset(Domain::filled, 4, 5);
  auto merged = merge_for_denoiser({&data});
  auto vocab = fixture_vocabulary(16, 1);
  CHECK(vocab.size() == 10);
  CHECK(vocab.id("<pad>") == 0);
  CHECK(vocab.id(shape_classes()[3]) == 4);
  CHECK(vocab.id("outline") == 9);
  DenoiserTrainConfig cfg;
  cfg.steps = 30;
  cfg.batch = 8;
  cfg.model.embed_dim = 16;
  TrainLog log;
  auto s = make_schedule();
  auto d = train_denoiser(merged, vocab, s, cfg, 3, &log);
  CHECK_FALSE(log.epoch_loss.empty());
  for (double l : log.epoch_loss) CHECK(std::isfinite(l));
  auto d2 = train_denoiser(merged, vocab, s, cfg, 3);
  CHECK(hash_parameters(d.parameters()) == hash_parameters(d2.parameters()));

  Tensor cond = class_condition(vocab, 2, "filled");
  CHECK(cond.shape() == Shape{2, 16});
  CHECK_THROWS(class_condition(vocab, 2, "sketch"));
}

TEST_CASE("manifest text") {
  FixtureManifest m;
  m.set("b", 0.1);
  m.set("a", "x y");
  auto back = FixtureManifest::parse(m.text());
  CHECK(back.get("a") == "x y");
  CHECK(back.number("b") == 0.1);
  CHECK(back.text() == m.text());
  CHECK_THROWS(m.get("missing"));
}

TEST_CASE("identity codec needs no training") {
  Codec c;
  CHECK(c.kind() == CodecKind::identity);
  CHECK(c.parameters().empty());
  auto x = generate_dataset(Domain::filled, 1, 9).images;
  CHECK(reconstruction_error(c, x) == 0.0);
}
