#include "ddis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ddis/hash.hpp"

namespace ddis {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* kind_name(RecordKind k) {
  switch (k) {
    case RecordKind::classifier: return "classifier";
    case RecordKind::denoiser: return "denoiser";
    case RecordKind::codec: return "codec";
    case RecordKind::token: return "token";
    case RecordKind::manifest: return "manifest";
  }
  return "unknown";
}

const std::string& Record::attr(const std::string& key) const {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw Error("record '" + name + "' has no attribute '" + key + "'");
  return it->second;
}

const Tensor& Record::tensor(const std::string& key) const {
  for (const auto& [k, t] : tensors)
    if (k == key) return t;
  throw Error("record '" + name + "' has no tensor '" + key + "'");
}

bool Record::has_tensor(const std::string& key) const {
  for (const auto& kv : tensors)
    if (kv.first == key) return true;
  return false;
}

void Checkpoint::put(Record r) {
  for (auto& existing : records)
    if (existing.name == r.name) {
      existing = std::move(r);
      return;
    }
  records.push_back(std::move(r));
}

const Record* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

const Record& Checkpoint::get(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  throw Error("checkpoint has no record '" + name + "'");
}

namespace {

template <class T>
void put_raw(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str16(std::string& out, const std::string& s) {
  if (s.size() > 0xFFFF) throw Error("checkpoint: name too long");
  put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out += s;
}

void put_str32(std::string& out, const std::string& s) {
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string context) : b_(bytes), ctx_(std::move(context)) {}
  template <class T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() { return str(raw<std::uint16_t>()); }
  std::string str32() { return str(raw<std::uint32_t>()); }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error(ctx_ + ": truncated data");
  }
  const std::string& b_;
  std::string ctx_;
  std::size_t pos_ = 0;
};

std::string raw_hash(const std::string& bytes) {
  std::string hex = sha256_hex(std::string_view(bytes));
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) out.push_back(static_cast<char>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct Entry {
  std::string name;
  RecordKind kind;
  std::uint64_t offset, length;
  std::string hash;
};

std::vector<Entry> read_table(const std::string& bytes, const std::string& path) {
  Reader r(bytes, "checkpoint '" + path + "'");
  if (r.str(4) != "DDIS") throw Error("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = r.raw<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw Error("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  const auto count = r.raw<std::uint32_t>();
  std::vector<Entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str16();
    const auto k = r.raw<std::uint8_t>();
    if (k < 1 || k > 5) throw Error("checkpoint record '" + e.name + "' has unknown kind " + std::to_string(k));
    e.kind = static_cast<RecordKind>(k);
    e.offset = r.raw<std::uint64_t>();
    e.length = r.raw<std::uint64_t>();
    e.hash = r.str(32);
    if (e.offset + e.length > bytes.size()) throw Error("checkpoint record '" + e.name + "' extends past end of file");
    table.push_back(std::move(e));
  }
  return table;
}

Record read_entry(const std::string& bytes, const Entry& e) {
  std::string payload = bytes.substr(e.offset, e.length);
  if (raw_hash(payload) != e.hash) throw Error("checkpoint record '" + e.name + "' failed its SHA-256 check");
  return decode_payload(e.name, e.kind, payload);
}

}  // namespace

std::string encode_payload(const Record& r) {
  std::string out;
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.attrs.size()));
  for (const auto& [k, v] : r.attrs) {
    put_str16(out, k);
    put_str32(out, v);
  }
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensors.size()));
  for (const auto& [k, t] : r.tensors) {
    put_str16(out, k);
    put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) put_raw<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data().data()), t.data().size() * sizeof(double));
  }
  return out;
}

Record decode_payload(const std::string& name, RecordKind kind, const std::string& bytes) {
  Reader rd(bytes, "record '" + name + "'");
  Record r;
  r.name = name;
  r.kind = kind;
  const auto na = rd.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < na; ++i) {
    auto k = rd.str16();
    r.attrs[k] = rd.str32();
  }
  const auto nt = rd.raw<std::uint32_t>();
  for (std::uint32_t i = 0; i < nt; ++i) {
    auto k = rd.str16();
    const auto nd = rd.raw<std::uint8_t>();
    Shape shape;
    for (std::uint8_t d = 0; d < nd; ++d) shape.push_back(rd.raw<std::int64_t>());
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    const std::string raw = rd.str(data.size() * sizeof(double));
    std::memcpy(data.data(), raw.data(), raw.size());
    r.tensors.emplace_back(k, Tensor(shape, std::move(data)));
  }
  if (!rd.done()) throw Error("record '" + name + "' has trailing bytes");
  return r;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::vector<std::string> payloads;
  std::size_t header = 4 + 2 + 4;
  for (const auto& r : ck.records) {
    payloads.push_back(encode_payload(r));
    header += 2 + r.name.size() + 1 + 8 + 8 + 32;
  }
  std::string out = "DDIS";
  put_raw<std::uint16_t>(out, kCheckpointVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ck.records.size()));
  std::uint64_t offset = header;
  for (std::size_t i = 0; i < ck.records.size(); ++i) {
    put_str16(out, ck.records[i].name);
    put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(ck.records[i].kind));
    put_raw<std::uint64_t>(out, offset);
    put_raw<std::uint64_t>(out, payloads[i].size());
    out += raw_hash(payloads[i]);
    offset += payloads[i].size();
  }
  for (const auto& p : payloads) out += p;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("short write to checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  Checkpoint ck;
  for (const auto& e : read_table(bytes, path)) ck.records.push_back(read_entry(bytes, e));
  return ck;
}

Record load_record(const std::string& path, const std::string& name) {
  const std::string bytes = read_file(path);
  for (const auto& e : read_table(bytes, path))
    if (e.name == name) return read_entry(bytes, e);
  throw Error("checkpoint '" + path + "' has no record '" + name + "'");
}

std::vector<std::pair<std::string, RecordKind>> list_records(const std::string& path) {
  std::vector<std::pair<std::string, RecordKind>> out;
  for (const auto& e : read_table(read_file(path), path)) out.emplace_back(e.name, e.kind);
  return out;
}

namespace {

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }


std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::int64_t> split_ints(const std::string& s) {
  std::vector<std::int64_t> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stoll(part));
  return out;
}

// Doubles stored as tensors so they round-trip bit-exactly.
double scalar_of(const Record& r, const std::string& key) { return r.tensor(key).item(); }

void add_params(Record& r, const ParameterList& params) {
  for (const auto& p : params) r.tensors.emplace_back(p.name, p.value.detach());
}

void load_params(const Record& r, const ParameterList& params) {
  for (const auto& p : params) {
    const Tensor& src = r.tensor(p.name);
    if (src.shape() != p.value.shape())
      throw ShapeError("record '" + r.name + "': tensor '" + p.name + "' has shape " + to_string(src.shape()) +
                       ", model expects " + to_string(p.value.shape()));
    Tensor dst = p.value;
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

void expect_kind(const Record& r, RecordKind k) {
  if (r.kind != k)
    throw Error("record '" + r.name + "' is a " + kind_name(r.kind) + " record, expected " + kind_name(k));
}

}  // namespace

Record to_record(const ClassifierModel& m, const std::string& name) {
  Record r{name, RecordKind::classifier, {}, {}};
  const auto& c = m.config();
  r.attrs["in_channels"] = std::to_string(c.in_channels);
  r.attrs["image_size"] = std::to_string(c.image_size);
  r.attrs["widths"] = join(c.widths);
  r.attrs["num_classes"] = std::to_string(c.num_classes);
  r.attrs["statistics_initialized"] = m.statistics_initialized() ? "1" : "0";
  r.tensors.emplace_back("momentum", Tensor::scalar(c.momentum));
  r.tensors.emplace_back("bn_eps", Tensor::scalar(c.bn_eps));
  add_params(r, m.parameters());
  const auto& bns = m.batch_norms();
  for (std::size_t l = 0; l < bns.size(); ++l) {
    const auto C = static_cast<std::int64_t>(bns[l].running_mean.size());
    r.tensors.emplace_back("bn" + std::to_string(l) + ".running_mean", Tensor({C}, bns[l].running_mean));
    r.tensors.emplace_back("bn" + std::to_string(l) + ".running_var", Tensor({C}, bns[l].running_var));
  }
  return r;
}

ClassifierModel classifier_from_record(const Record& r) {
  expect_kind(r, RecordKind::classifier);
  ClassifierConfig c;
  c.in_channels = std::stoll(r.attr("in_channels"));
  c.image_size = std::stoll(r.attr("image_size"));
  c.widths = split_ints(r.attr("widths"));
  c.num_classes = std::stoll(r.attr("num_classes"));
  c.momentum = scalar_of(r, "momentum");
  c.bn_eps = scalar_of(r, "bn_eps");
  ClassifierModel m(c, 0);
  load_params(r, m.parameters());
  auto& bns = m.batch_norms();
  for (std::size_t l = 0; l < bns.size(); ++l) {
    bns[l].running_mean = to_vector(r.tensor("bn" + std::to_string(l) + ".running_mean"));
    bns[l].running_var = to_vector(r.tensor("bn" + std::to_string(l) + ".running_var"));
  }
  m.set_statistics_initialized(r.attr("statistics_initialized") == "1");
  return m;
}

Record to_record(const DenoiserModel& m, const std::string& name) {
  Record r{name, RecordKind::denoiser, {}, {}};
  const auto& c = m.config();
  r.attrs["role"] = "noise-predictor";
  r.attrs["config"] = join({c.channels, c.size, c.base, c.mid, c.deep, c.embed_dim, c.time_dim, c.attn_dim, c.train_steps});
  add_params(r, m.parameters());
  return r;
}

DenoiserModel denoiser_from_record(const Record& r) {
  expect_kind(r, RecordKind::denoiser);
  if (r.attr("role") != "noise-predictor") throw Error("record '" + r.name + "' is not a noise predictor");
  auto v = split_ints(r.attr("config"));
  if (v.size() != 9) throw Error("record '" + r.name + "': malformed denoiser config");
  DenoiserConfig c{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], static_cast<int>(v[8])};
  DenoiserModel m(c, 0);
  load_params(r, m.parameters());
  return m;
}

Record to_record(const ConditioningVocabulary& v, const std::string& name) {
  Record r{name, RecordKind::denoiser, {}, {}};
  r.attrs["role"] = "vocabulary";
  std::string tokens;
  for (std::size_t i = 0; i < v.tokens().size(); ++i) tokens += (i ? "\n" : "") + v.tokens()[i];
  r.attrs["tokens"] = tokens;
  r.tensors.emplace_back("table", v.table().detach());
  return r;
}

ConditioningVocabulary vocabulary_from_record(const Record& r) {
  expect_kind(r, RecordKind::denoiser);
  if (r.attr("role") != "vocabulary") throw Error("record '" + r.name + "' is not a vocabulary");
  std::vector<std::string> tokens;
  std::istringstream is(r.attr("tokens"));
  std::string line;
  while (std::getline(is, line)) tokens.push_back(line);
  const Tensor& table = r.tensor("table");
  if (table.ndim() != 2 || table.dim(0) != static_cast<std::int64_t>(tokens.size()))
    throw ShapeError("record '" + r.name + "': vocabulary table does not match token list");
  ConditioningVocabulary v(tokens, table.dim(1), 0);
  std::copy(table.data().begin(), table.data().end(), v.table().data().begin());
  return v;
}

Record to_record(const Codec& c, const std::string& name) {
  Record r{name, RecordKind::codec, {}, {}};
  const auto& cc = c.config();
  r.attrs["variant"] = cc.kind == CodecKind::identity ? "identity" : "learned-ae";
  r.attrs["config"] = join({cc.channels, cc.size, cc.latent_channels, cc.hidden});
  r.tensors.emplace_back("latent_scale", Tensor::scalar(c.latent_scale()));
  add_params(r, c.parameters());
  return r;
}

Codec codec_from_record(const Record& r) {
  expect_kind(r, RecordKind::codec);
  auto v = split_ints(r.attr("config"));
  if (v.size() != 4) throw Error("record '" + r.name + "': malformed codec config");
  const auto& variant = r.attr("variant");
  if (variant != "identity" && variant != "learned-ae") throw Error("record '" + r.name + "': unknown codec variant");
  CodecConfig cc{variant == "identity" ? CodecKind::identity : CodecKind::learned, v[0], v[1], v[2], v[3]};
  Codec c(cc, 0);
  load_params(r, c.parameters());
  c.set_latent_scale(scalar_of(r, "latent_scale"));
  return c;
}

Record to_record(const TokenEmbedding& t, const std::string& config_hash, const std::string& name) {
  Record r{name, RecordKind::token, {}, {}};
  r.attrs["class_id"] = std::to_string(t.class_id);
  r.attrs["width"] = std::to_string(t.width());
  r.attrs["tokens"] = std::to_string(t.token_count());
  r.attrs["config_hash"] = config_hash;
  r.attrs["steps"] = std::to_string(t.steps);
  r.tensors.emplace_back("vectors", t.vectors.detach());
  const auto n = static_cast<std::int64_t>(t.moments.m.size());
  r.tensors.emplace_back("adam_m", Tensor({n}, t.moments.m));
  r.tensors.emplace_back("adam_v", Tensor({n}, t.moments.v));
  std::vector<double> log;
  for (const auto& e : t.log) log.insert(log.end(), {static_cast<double>(e.epoch), e.mean_ce, e.correct_fraction});
  r.tensors.emplace_back("log", Tensor({static_cast<std::int64_t>(t.log.size()), 3}, log));
  return r;
}

TokenEmbedding token_from_record(const Record& r) {
  expect_kind(r, RecordKind::token);
  TokenEmbedding t;
  t.class_id = std::stoi(r.attr("class_id"));
  t.vectors = r.tensor("vectors").detach();
  if (t.vectors.ndim() != 2 || t.vectors.dim(1) != std::stoll(r.attr("width")))
    throw ShapeError("record '" + r.name + "': token width mismatch");
  t.steps = std::stol(r.attr("steps"));
  t.moments.m = to_vector(r.tensor("adam_m"));
  t.moments.v = to_vector(r.tensor("adam_v"));
  const Tensor& log = r.tensor("log");
  for (std::int64_t i = 0; i < log.dim(0); ++i)
    t.log.push_back({static_cast<int>(log[i * 3]), log[i * 3 + 1], log[i * 3 + 2]});
  return t;
}

Record to_record(const FixtureManifest& m, const std::string& name) {
  Record r{name, RecordKind::manifest, {}, {}};
  r.attrs["text"] = m.text();
  return r;
}

FixtureManifest manifest_from_record(const Record& r) {
  expect_kind(r, RecordKind::manifest);
  return FixtureManifest::parse(r.attr("text"));
}

Checkpoint to_checkpoint(const FixtureBundle& fb) {
  Checkpoint ck;
  ck.put(to_record(fb.classifier));
  ck.put(to_record(fb.denoiser));
  ck.put(to_record(fb.vocab));
  ck.put(to_record(fb.identity, "codec.identity"));
  if (fb.codec) ck.put(to_record(*fb.codec, "codec.learned"));
  if (fb.latent_denoiser) ck.put(to_record(*fb.latent_denoiser, "denoiser.latent"));
  ck.put(to_record(fb.manifest));
  return ck;
}

FixtureBundle bundle_from_checkpoint(const Checkpoint& ck) {
  FixtureBundle fb;
  fb.classifier = classifier_from_record(ck.get("classifier"));
  fb.denoiser = denoiser_from_record(ck.get("denoiser"));
  fb.vocab = vocabulary_from_record(ck.get("vocabulary"));
  fb.identity = codec_from_record(ck.get("codec.identity"));
  if (const auto* r = ck.find("codec.learned")) fb.codec = codec_from_record(*r);
  if (const auto* r = ck.find("denoiser.latent")) fb.latent_denoiser = denoiser_from_record(*r);
  fb.manifest = manifest_from_record(ck.get("manifest"));
  return fb;
}

}  // namespace ddis
