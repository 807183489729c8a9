#include <filesystem>
#include <fstream>

#include "ddis/checkpoint.hpp"
#include "ddis/cli.hpp"
#include "ddis/config.hpp"
#include "ddis/io.hpp"
#include "helpers.hpp"

using namespace ddis;
using testing::bit_equal;
namespace fs = std::filesystem;

namespace {

std::string scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ddis_unit_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return (dir / name).string();
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.put(to_record(testing::tiny_classifier(3)));
  DenoiserConfig dc;
  dc.size = 4;
  ck.put(to_record(DenoiserModel(dc, 4)));
  ConditioningVocabulary vocab({"<pad>", "x", "y"}, 32, 2);
  ck.put(to_record(vocab));
  ck.put(to_record(Codec(CodecConfig{CodecKind::learned, 1, 16, 4, 8}, 5), "codec.learned"));
  auto tok = init_token(1, 1, vocab, 7);
  tok.log.push_back({1, 1.5, 0.25});
  ck.put(to_record(tok, "abc", "token.1"));
  FixtureManifest m;
  m.set("seed", "1");
  ck.put(to_record(m));
  return ck;
}

void flip_byte(const std::string& path, std::streamoff at) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(at);
  char c;
  f.get(c);
  f.seekp(at);
  f.put(static_cast<char>(c ^ 0x10));
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const auto path = scratch("rt.ddis");
  auto ck = sample_checkpoint();
  save_checkpoint(ck, path);
  auto back = load_checkpoint(path);
  REQUIRE(back.records.size() == ck.records.size());
  for (const auto& r : ck.records) {
    const auto& b = back.get(r.name);
    CHECK(b.kind == r.kind);
    CHECK(b.attrs == r.attrs);
    REQUIRE(b.tensors.size() == r.tensors.size());
    for (std::size_t i = 0; i < r.tensors.size(); ++i) {
      CHECK(b.tensors[i].first == r.tensors[i].first);
      CHECK(bit_equal(b.tensors[i].second, r.tensors[i].second));
    }
  }
  // models come back with identical behaviour
  auto clf = classifier_from_record(back.get("classifier"));
  auto orig = testing::tiny_classifier(3);
  Tensor x = testing::uniform({2, 1, 4, 4}, 1, -1, 1);
  CHECK(bit_equal(clf.forward(x).logits, orig.forward(x).logits));
  CHECK(hash_parameters(denoiser_from_record(back.get("denoiser")).parameters()) ==
        hash_parameters(denoiser_from_record(ck.get("denoiser")).parameters()));
  auto tok = token_from_record(back.get("token.1"));
  CHECK(tok.class_id == 1);
  CHECK(tok.log.size() == 1);
  CHECK(tok.log[0].correct_fraction == 0.25);
  CHECK(vocabulary_from_record(back.get("vocabulary")).tokens() == std::vector<std::string>{"<pad>", "x", "y"});
}

TEST_CASE("checkpoint integrity") {
  const auto path = scratch("bad.ddis");
  auto ck = sample_checkpoint();
  save_checkpoint(ck, path);
  const auto size = static_cast<std::streamoff>(fs::file_size(path));

  SUBCASE("flipped byte names its record") {
    flip_byte(path, size - 20);  // inside the last payload
    const auto& last = ck.records.back().name;
    try {
      load_checkpoint(path);
      FAIL("corruption went unnoticed");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("'" + last + "'") != std::string::npos);
    }
    // other records still load on their own
    CHECK_NOTHROW(load_record(path, "token.1"));
    CHECK_THROWS(load_record(path, last));
  }
  SUBCASE("version") {
    flip_byte(path, 4);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), Error);
  }
  SUBCASE("magic") {
    flip_byte(path, 0);
    CHECK_THROWS_AS(load_checkpoint(path), Error);
  }
  SUBCASE("truncation") {
    fs::resize_file(path, static_cast<std::uintmax_t>(size - 3));
    CHECK_THROWS_AS(load_checkpoint(path), Error);
  }
}

TEST_CASE("token record stands alone") {
  const auto path = scratch("tok.ddis");
  save_checkpoint(sample_checkpoint(), path);
  auto names = list_records(path);
  CHECK(names.size() == 6);
  auto r = load_record(path, "token.1");
  CHECK(r.kind == RecordKind::token);
  CHECK(r.attr("config_hash") == "abc");
  CHECK(token_from_record(r).vectors.size() == 32);
  CHECK_THROWS(load_record(path, "token.9"));
}

TEST_CASE("run config") {
  RunConfig c;
  CHECK(c.get("dag.lambda_bn") == "0.01");
  CHECK(c.number("schedule.cfg_scale") == 15.0);
  const auto h = c.hash();
  auto parsed = RunConfig::parse("# comment\n dag.s_g = 5 \n\ncat.lr=0.001\n");
  CHECK(parsed.number("dag.s_g") == 5.0);
  CHECK(parsed.number("cat.lr") == 0.001);
  CHECK(parsed.hash() != h);
  CHECK(RunConfig::parse(c.canonical()).hash() == h);
  CHECK_THROWS_WITH(RunConfig::parse("dag.bogus = 1"), doctest::Contains("unknown config key"));
  CHECK_THROWS_WITH(RunConfig::parse("\n\nnot a pair"), doctest::Contains(":3"));
  CHECK_THROWS(RunConfig::parse("cat.max_epochs = many"));
  CHECK_THROWS(dag_from(RunConfig::parse("dag.lambda_bn = -1")));

  auto d = dag_from(parsed);
  CHECK(d.s_g == 5.0);
  CHECK(d.eta() == 0.01 * 5.0);
  CHECK(cat_from(parsed).lr == 0.001);
}

TEST_CASE("image files") {
  Tensor img({4, 3}, std::vector<double>{-1, -0.5, 0, 0.5, 1, 1, -1, 0.25, 0.75, -0.75, 0.1, -0.1});
  const auto p = scratch("x.pgm");
  write_pgm(p, img);
  Tensor back = read_pgm(p);
  CHECK(back.shape() == Shape{4, 3});
  for (std::int64_t i = 0; i < 12; ++i) CHECK(std::abs(back[i] - img[i]) <= 1.0 / 255.0 + 1e-12);

  const auto r = scratch("x.raw");
  Tensor t = testing::randn({2, 1, 3, 5}, 8);
  write_raw(r, t);
  CHECK(bit_equal(read_raw(r), t));

  write_pgm_grid(scratch("grid.pgm"), testing::uniform({10, 1, 4, 4}, 2, -1, 1), 4);
  CHECK(read_pgm(scratch("grid.pgm")).shape() == Shape{3 * 5 + 1, 4 * 5 + 1});
}

TEST_CASE("cli usage errors") {
  CHECK(run_cli({"ddis", "--no-such-flag"}) == 1);
  CHECK(run_cli({"ddis", "frobnicate"}) == 1);
  CHECK(run_cli({"ddis", "--help"}) == 0);
  CHECK(run_cli({"ddis", "--precision", "f16", "oracle", "check"}) == 1);
}

TEST_CASE("cli oracle check") {
  const auto out = scratch("oracle_run");
  CHECK(run_cli({"ddis", "--out", out, "--set", "oracle.samples=400", "oracle", "check"}) == 0);
  CHECK(fs::exists(out + "/oracle.csv"));
  CHECK(fs::exists(out + "/manifest.txt"));
  auto manifest = read_text(out + "/manifest.txt");
  CHECK(manifest.find("config_hash") != std::string::npos);
}

TEST_CASE("parallel_for covers every index once") {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
}
