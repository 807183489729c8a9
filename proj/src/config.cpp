#include "ddis/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ddis/hash.hpp"

namespace ddis {

namespace {

enum class Kind { real, integer, flag, text, reals, integers };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* value;
};

// The schema. Defaults match the library structs.
const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = {
      {"seed", Kind::integer, "7"},
      {"precision", Kind::text, "f64"},
      {"checkpoint", Kind::text, "fixture/fixtures.ddis"},

      {"schedule.train_steps", Kind::integer, "1000"},
      {"schedule.beta_start", Kind::real, "0.0001"},
      {"schedule.beta_end", Kind::real, "0.02"},
      {"schedule.sample_steps", Kind::integer, "30"},
      {"schedule.sigma", Kind::text, "deterministic"},
      {"schedule.cfg_scale", Kind::real, "15"},

      {"dag.lambda_bn", Kind::real, "0.01"},
      {"dag.s_g", Kind::real, "20"},
      {"dag.squared", Kind::flag, "false"},
      {"dag.knee", Kind::real, "0.9"},
      {"dag.apply_range", Kind::integers, ""},

      {"cat.lr", Kind::real, "0.005"},
      {"cat.max_epochs", Kind::integer, "30"},
      {"cat.accumulation", Kind::integer, "20"},
      {"cat.threshold", Kind::real, "0.7"},
      {"cat.gradient_skip", Kind::flag, "true"},
      {"cat.extra_tokens", Kind::integer, "0"},
      {"cat.bn_loss_weight", Kind::real, "0"},
      {"cat.unfreeze_denoiser", Kind::flag, "false"},

      {"synth.classes", Kind::integers, ""},
      {"synth.per_class", Kind::integer, "64"},
      {"synth.batch", Kind::integer, "32"},

      {"sample.class", Kind::integer, "0"},
      {"sample.count", Kind::integer, "16"},
      {"sample.domain", Kind::text, "<pad>"},
      {"sample.codec", Kind::text, "identity"},

      {"di.iterations", Kind::integer, "200"},
      {"di.lr", Kind::real, "0.05"},
      {"di.lambda_bn", Kind::real, "0.01"},
      {"di.batch", Kind::integer, "64"},

      {"kd.temperature", Kind::real, "4"},
      {"kd.epochs", Kind::integer, "30"},
      {"kd.batch", Kind::integer, "64"},
      {"kd.lr", Kind::real, "0.003"},
      {"kd.student_widths", Kind::integers, "8,16"},

      {"oracle.samples", Kind::integer, "10000"},
      {"oracle.sample_steps", Kind::integer, "30"},
      {"oracle.sigma", Kind::text, "deterministic"},

      {"sweep.lambda_bn", Kind::reals, "0,0.001,0.01,0.1"},
      {"sweep.s_g", Kind::reals, "5,20"},
      {"sweep.batch", Kind::integer, "16"},
      {"sweep.class", Kind::integer, "0"},

      {"bn_study.n", Kind::integer, "16"},
      {"bn_study.class", Kind::integer, "0"},

      {"fixtures.seed", Kind::integer, "20240601"},
      {"fixtures.classifier_epochs", Kind::integer, "6"},
      {"fixtures.denoiser_steps", Kind::integer, "4000"},
      {"fixtures.learned_codec", Kind::flag, "true"},
      {"fixtures.codec_steps", Kind::integer, "1500"},
      {"fixtures.latent_denoiser_steps", Kind::integer, "1500"},
  };
  return s;
}

const KeySpec* find_spec(const std::string& key) {
  for (const auto& k : schema())
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(x)) throw Error("config key '" + key + "': '" + v + "' is not a finite number");
  return x;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error("config key '" + key + "': '" + v + "' is not an integer");
  return x;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config key '" + key + "': '" + v + "' is not a boolean");
}

void check(const KeySpec& spec, const std::string& v) {
  switch (spec.kind) {
    case Kind::real: parse_real(spec.key, v); break;
    case Kind::integer: parse_int(spec.key, v); break;
    case Kind::flag: parse_flag(spec.key, v); break;
    case Kind::reals:
      for (const auto& p : split_list(v)) parse_real(spec.key, p);
      break;
    case Kind::integers:
      for (const auto& p : split_list(v)) parse_int(spec.key, p);
      break;
    case Kind::text: break;
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.key] = k.value;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read config '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse(os.str(), path);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto* spec = find_spec(key);
  if (!spec) throw Error("unknown config key '" + key + "'");
  check(*spec, value);
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw Error("unknown config key '" + key + "'");
  return it->second;
}

bool RunConfig::has_key(const std::string& key) const { return find_spec(key) != nullptr; }

double RunConfig::number(const std::string& key) const { return parse_real(key, get(key)); }
std::int64_t RunConfig::integer(const std::string& key) const { return parse_int(key, get(key)); }
bool RunConfig::flag(const std::string& key) const { return parse_flag(key, get(key)); }

std::vector<double> RunConfig::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& p : split_list(get(key))) out.push_back(parse_real(key, p));
  return out;
}

std::vector<int> RunConfig::integers(const std::string& key) const {
  std::vector<int> out;
  for (const auto& p : split_list(get(key))) out.push_back(static_cast<int>(parse_int(key, p)));
  return out;
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string RunConfig::hash() const { return sha256_hex(std::string_view(canonical())); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : schema()) out.push_back(k.key);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {
SigmaMode sigma_mode(const std::string& key, const std::string& v) {
  if (v == "deterministic") return SigmaMode::deterministic;
  if (v == "ddpm") return SigmaMode::ddpm_matched;
  throw Error("config key '" + key + "': expected deterministic or ddpm, got '" + v + "'");
}
}  // namespace

NoiseSchedule schedule_from(const RunConfig& c) {
  return make_schedule(static_cast<int>(c.integer("schedule.train_steps")), c.number("schedule.beta_start"),
                       c.number("schedule.beta_end"), static_cast<int>(c.integer("schedule.sample_steps")),
                       sigma_mode("schedule.sigma", c.get("schedule.sigma")), c.number("schedule.cfg_scale"));
}

DagConfig dag_from(const RunConfig& c) {
  DagConfig d;
  d.lambda_bn = c.number("dag.lambda_bn");
  d.s_g = c.number("dag.s_g");
  d.squared = c.flag("dag.squared");
  d.knee = c.number("dag.knee");
  d.apply_range = c.integers("dag.apply_range");
  d.validate();
  return d;
}

CatTrainConfig cat_from(const RunConfig& c) {
  CatTrainConfig t;
  t.lr = c.number("cat.lr");
  t.max_epochs = static_cast<int>(c.integer("cat.max_epochs"));
  t.accumulation = static_cast<int>(c.integer("cat.accumulation"));
  t.threshold = c.number("cat.threshold");
  t.gradient_skip = c.flag("cat.gradient_skip");
  t.extra_token_count = static_cast<int>(c.integer("cat.extra_tokens"));
  t.bn_loss_weight = c.number("cat.bn_loss_weight");
  t.unfreeze_denoiser = c.flag("cat.unfreeze_denoiser");
  t.seed = static_cast<std::uint64_t>(c.integer("seed"));
  return t;
}

DiConfig di_from(const RunConfig& c) {
  DiConfig d;
  d.iterations = static_cast<int>(c.integer("di.iterations"));
  d.lr = c.number("di.lr");
  d.lambda_bn = c.number("di.lambda_bn");
  d.batch = static_cast<std::size_t>(c.integer("di.batch"));
  return d;
}

KdConfig kd_from(const RunConfig& c) {
  KdConfig k;
  k.temperature = c.number("kd.temperature");
  k.epochs = static_cast<int>(c.integer("kd.epochs"));
  k.batch = static_cast<std::size_t>(c.integer("kd.batch"));
  k.lr = c.number("kd.lr");
  return k;
}

FixtureBuildConfig fixture_build_from(const RunConfig& c) {
  FixtureBuildConfig f;
  f.seed = static_cast<std::uint64_t>(c.integer("fixtures.seed"));
  f.classifier.epochs = static_cast<int>(c.integer("fixtures.classifier_epochs"));
  f.denoiser.steps = static_cast<int>(c.integer("fixtures.denoiser_steps"));
  f.learned_codec = c.flag("fixtures.learned_codec");
  f.codec.steps = static_cast<int>(c.integer("fixtures.codec_steps"));
  f.latent_denoiser.steps = static_cast<int>(c.integer("fixtures.latent_denoiser_steps"));
  return f;
}

}  // namespace ddis
