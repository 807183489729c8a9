#include "ddis/fixtures.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "ddis/class_token.hpp"
#include "ddis/evaluation.hpp"
#include "ddis/guidance.hpp"
#include "ddis/hash.hpp"
#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

const char* domain_name(Domain d) { return d == Domain::filled ? "filled" : "outline"; }

Domain parse_domain(const std::string& name) {
  if (name == "filled") return Domain::filled;
  if (name == "outline") return Domain::outline;
  throw Error("unknown domain '" + name + "'");
}

const std::vector<std::string>& shape_classes() {
  static const std::vector<std::string> names{"disk", "square", "triangle", "cross", "ring", "bar", "diamond"};
  return names;
}

namespace {

struct Placement {
  double cx, cy, scale, rot;
};

double box(double x, double y, double a, double b) {
  const double qx = std::abs(x) - a, qy = std::abs(y) - b;
  return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
}

double rhombus(double x, double y, double a, double b) {
  const double qx = std::abs(x), qy = std::abs(y);
  const double h = std::clamp((-2.0 * (qx * a - qy * b) + (a * a - b * b)) / (a * a + b * b), -1.0, 1.0);
  const double d = std::hypot(qx - 0.5 * a * (1.0 - h), qy - 0.5 * b * (1.0 + h));
  const double side = qx * b + qy * a - a * b;
  return side < 0 ? -d : d;
}

double triangle(double x, double y, double r) {
  const double k = std::sqrt(3.0);
  x = std::abs(x) - r;
  y = y + r / k;
  if (x + k * y > 0.0) {
    const double nx = (x - k * y) / 2.0, ny = (-k * x - y) / 2.0;
    x = nx;
    y = ny;
  }
  x -= std::clamp(x, -2.0 * r, 0.0);
  const double len = std::hypot(x, y);
  return y < 0 ? len : -len;
}

// Signed distance (pixels) to the class shape; negative inside.
double shape_sdf(int cls, double px, double py, const Placement& p) {
  double x = px - p.cx, y = -(py - p.cy);
  const double c = std::cos(p.rot), s = std::sin(p.rot);
  const double rx = c * x + s * y, ry = -s * x + c * y;
  x = rx;
  y = ry;
  const double k = p.scale;
  switch (cls) {
    case 0: return std::hypot(x, y) - 4.6 * k;
    case 1: return box(x, y, 4.0 * k, 4.0 * k);
    case 2: return triangle(x, y + 0.8 * k, 4.9 * k);
    case 3: return std::min(box(x, y, 5.5 * k, 1.6 * k), box(x, y, 1.6 * k, 5.5 * k));
    case 4: return std::abs(std::hypot(x, y) - 4.3 * k) - 1.3 * k;
    case 5: return box(x, y, 6.0 * k, 1.8 * k);
    case 6: return rhombus(x, y, 5.8 * k, 3.6 * k);
    default: throw Error("unknown shape class");
  }
}

bool rotates(int cls) { return cls != 0 && cls != 4; }

void render(int cls, Domain domain, const Placement& p, std::int64_t side, double* out) {
  const double bg = domain == Domain::filled ? -0.8 : 0.6;
  const double fg = domain == Domain::filled ? 0.8 : -0.8;
  const double stroke = 1.0;
  const double centre = static_cast<double>(side) / 2.0;
  Placement q = p;
  q.cx += centre;
  q.cy += centre;
  for (std::int64_t i = 0; i < side; ++i)
    for (std::int64_t j = 0; j < side; ++j) {
      int hit = 0;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          const double d = shape_sdf(cls, j + (b + 0.5) / 4.0, i + (a + 0.5) / 4.0, q);
          hit += domain == Domain::filled ? d < 0.0 : std::abs(d) < stroke;
        }
      out[i * side + j] = bg + (fg - bg) * hit / 16.0;
    }
}

}  // namespace

std::string FixtureDataset::hash() const {
  Sha256 h;
  h.update(domain_name(domain));
  h.update(images.data().data(), images.data().size() * sizeof(double));
  h.update(labels.data(), labels.size() * sizeof(std::int64_t));
  return h.hex();
}

FixtureDataset generate_dataset(Domain domain, std::size_t per_class, std::uint64_t seed, std::int64_t side) {
  if (per_class < 1) throw Error("generate_dataset: need at least one image per class");
  const auto classes = static_cast<int>(shape_classes().size());
  FixtureDataset ds;
  ds.domain = domain;
  ds.seed = seed;
  const auto n = static_cast<std::int64_t>(per_class) * classes;
  ds.images = Tensor({n, 1, side, side}, 0.0);
  Rng rng(mix_seed(seed, domain == Domain::filled ? 11 : 12));
  std::int64_t k = 0;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int c = 0; c < classes; ++c, ++k) {
      Placement p{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.8, 1.2), 0.0};
      const double r = rng.uniform(-15.0, 15.0) * M_PI / 180.0;
      if (rotates(c)) p.rot = r;
      render(c, domain, p, side, ds.images.data().data() + k * side * side);
      ds.labels.push_back(c);
    }
  return ds;
}

Tensor take_rows(const Tensor& t, const std::vector<std::int64_t>& rows) {
  if (t.ndim() < 1) throw ShapeError("take_rows: scalar tensor");
  const std::int64_t n = t.dim(0);
  const std::int64_t width = n ? t.size() / n : 0;
  Shape out = t.shape();
  out[0] = static_cast<std::int64_t>(rows.size());
  return reshape(gather_rows(reshape(t, {n, width}), rows), out);
}

double classifier_accuracy(const ClassifierModel& model, const Tensor& images, const std::vector<std::int64_t>& labels) {
  Tensor p = softmax_probabilities(model, images);
  const auto N = p.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = p.data().data() + static_cast<std::int64_t>(i) * N;
    correct += (std::max_element(row, row + N) - row) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {
std::vector<Tensor> leaves_of(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

double cosine_lr(double base, long step, long total) {
  return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(std::max(1L, total))));
}
}  // namespace

ClassifierModel train_classifier(const FixtureDataset& data, const ClassifierTrainConfig& config, std::uint64_t seed,
                                 TrainLog* log) {
  if (data.size() == 0) throw Error("train_classifier: empty dataset");
  ClassifierModel model(config.model, mix_seed(seed, 0xC1));
  auto params = model.parameters();
  set_trainable(params, true);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam(leaves_of(params), opts);
  Rng rng(mix_seed(seed, 0xC2));
  const std::size_t n = data.size();
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const long total = static_cast<long>((n + config.batch - 1) / config.batch) * config.epochs;
  long step = 0;
  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), std::mt19937_64(rng.next()));
    double sum_loss = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < n; s += config.batch) {
      std::vector<std::int64_t> idx(order.begin() + static_cast<long>(s),
                                    order.begin() + static_cast<long>(std::min(n, s + config.batch)));
      if (idx.size() < 2 && n >= 2) continue;
      std::vector<std::int64_t> y;
      for (auto i : idx) y.push_back(data.labels[static_cast<std::size_t>(i)]);
      adam.options().lr = cosine_lr(config.lr, step++, total);
      auto out = model.train_forward(take_rows(data.images, idx));
      Tensor loss = cross_entropy(out.logits, y);
      if (!std::isfinite(loss.item())) throw NumericError("train_classifier: loss diverged in epoch " + std::to_string(e + 1));
      adam.zero_grad();
      backward(loss);
      adam.step();
      sum_loss += loss.item();
      ++batches;
    }
    if (log) log->epoch_loss.push_back(sum_loss / std::max(1, batches));
  }
  adam.zero_grad();
  set_trainable(params, false);
  if (log) log->accuracy = classifier_accuracy(model, data.images, data.labels);
  return model;
}

ConditioningVocabulary fixture_vocabulary(std::int64_t width, std::uint64_t seed) {
  std::vector<std::string> tokens{"<pad>"};
  for (const auto& c : shape_classes()) tokens.push_back(c);
  tokens.push_back("filled");
  tokens.push_back("outline");
  // Per-coordinate scale of a CLIP-like token table, so a token-optimizer step
  // of 0.005 is a sizeable move relative to the rows.
  return ConditioningVocabulary(tokens, width, seed, 0.02);
}

Tensor class_condition(const ConditioningVocabulary& vocab, int class_id, const std::string& slot0) {
  if (class_id < 0 || class_id >= static_cast<int>(shape_classes().size()))
    throw Error("class id " + std::to_string(class_id) + " out of range");
  return vocab.embed({vocab.id(slot0), vocab.id(shape_classes()[static_cast<std::size_t>(class_id)])});
}

DenoiserData merge_for_denoiser(const std::vector<const FixtureDataset*>& parts) {
  DenoiserData d;
  std::vector<Tensor> imgs;
  for (const auto* p : parts) {
    imgs.push_back(p->images);
    d.labels.insert(d.labels.end(), p->labels.begin(), p->labels.end());
    d.domains.insert(d.domains.end(), p->size(), p->domain);
  }
  d.x0 = concat(imgs, 0);
  return d;
}

DenoiserModel train_denoiser(const DenoiserData& data, const ConditioningVocabulary& vocab, const NoiseSchedule& s,
                             const DenoiserTrainConfig& config, std::uint64_t seed, TrainLog* log) {
  const auto n = static_cast<std::int64_t>(data.labels.size());
  if (n == 0) throw Error("train_denoiser: empty dataset");
  DenoiserConfig mc = config.model;
  mc.train_steps = s.train_steps;
  mc.embed_dim = vocab.width();
  DenoiserModel model(mc, mix_seed(seed, 0xD1));
  auto params = model.parameters();
  set_trainable(params, true);
  AdamOptions opts;
  opts.lr = config.lr;
  opts.grad_clip = 1.0;
  Adam adam(leaves_of(params), opts);
  Rng rng(mix_seed(seed, 0xD2));
  const auto B = static_cast<std::int64_t>(config.batch);
  const std::int64_t per_epoch = std::max<std::int64_t>(1, n / B);
  const std::int64_t item = data.x0.size() / n;
  double window = 0.0;
  int count = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::int64_t> idx;
    std::vector<int> ts;
    std::vector<std::int64_t> ids;
    for (std::int64_t b = 0; b < B; ++b) {
      const auto i = rng.index(n);
      idx.push_back(i);
      ts.push_back(1 + static_cast<int>(rng.index(s.train_steps - 1)));
      if (rng.uniform() < config.null_prob) {
        ids.insert(ids.end(), {ConditioningVocabulary::kPad, ConditioningVocabulary::kPad});
      } else {
        const auto slot = rng.uniform() < config.domain_prob
                              ? vocab.id(domain_name(data.domains[static_cast<std::size_t>(i)]))
                              : ConditioningVocabulary::kPad;
        ids.insert(ids.end(), {slot, data.labels[static_cast<std::size_t>(i)] + 1});
      }
    }
    Tensor x0 = take_rows(data.x0, idx);
    Tensor eps = rng.normal_tensor(x0.shape());
    Tensor xt(x0.shape(), 0.0);
    for (std::int64_t b = 0; b < B; ++b) {
      const double a = s.abar(ts[static_cast<std::size_t>(b)]);
      for (std::int64_t j = 0; j < item; ++j)
        xt.data()[b * item + j] = std::sqrt(a) * x0[b * item + j] + std::sqrt(1.0 - a) * eps[b * item + j];
    }
    Tensor cond = reshape(vocab.embed(ids), {B, 2, vocab.width()});
    adam.options().lr = cosine_lr(config.lr, step, config.steps);
    Tensor loss = mean(square(sub(model.forward(xt, ts, cond), eps)));
    if (!std::isfinite(loss.item())) throw NumericError("train_denoiser: loss diverged at step " + std::to_string(step));
    adam.zero_grad();
    backward(loss);
    adam.step();
    window += loss.item();
    if (++count == per_epoch || step + 1 == config.steps) {
      if (log) log->epoch_loss.push_back(window / count);
      window = 0.0;
      count = 0;
    }
  }
  adam.zero_grad();
  set_trainable(params, false);
  return model;
}

double reconstruction_error(const Codec& codec, const Tensor& images) {
  NoGradGuard guard;
  Tensor r = codec.decode(codec.encode(images));
  double total = 0.0;
  for (std::int64_t i = 0; i < r.size(); ++i) total += std::abs(r[i] - images[i]);
  return total / static_cast<double>(r.size());
}

Codec train_codec(const FixtureDataset& data, const CodecTrainConfig& config, std::uint64_t seed, TrainLog* log) {
  if (data.size() == 0) throw Error("train_codec: empty dataset");
  Codec codec(config.model, mix_seed(seed, 0xE1));
  if (codec.kind() == CodecKind::identity) return codec;
  auto params = codec.parameters();
  set_trainable(params, true);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam(leaves_of(params), opts);
  Rng rng(mix_seed(seed, 0xE2));
  const auto n = static_cast<std::int64_t>(data.size());
  const std::int64_t per_epoch = std::max<std::int64_t>(1, n / static_cast<std::int64_t>(config.batch));
  double window = 0.0;
  int count = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::int64_t> idx;
    for (std::size_t b = 0; b < config.batch; ++b) idx.push_back(rng.index(n));
    Tensor x = take_rows(data.images, idx);
    adam.options().lr = cosine_lr(config.lr, step, config.steps);
    Tensor loss = mean(square(sub(codec.decode(codec.encode(x)), x)));
    if (!std::isfinite(loss.item())) throw NumericError("train_codec: loss diverged at step " + std::to_string(step));
    adam.zero_grad();
    backward(loss);
    adam.step();
    window += loss.item();
    if (++count == per_epoch || step + 1 == config.steps) {
      if (log) log->epoch_loss.push_back(window / count);
      window = 0.0;
      count = 0;
    }
  }
  adam.zero_grad();
  set_trainable(params, false);
  // Unit-variance latents for the latent denoiser.
  NoGradGuard guard;
  Tensor z = codec.encode(data.images);
  const double m = mean(z).item();
  const double sd = std::sqrt(mean(square(add_scalar(z, -m))).item());
  codec.set_latent_scale(1.0 / sd);
  return codec;
}

void FixtureManifest::set(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  entries[key] = os.str();
}

const std::string& FixtureManifest::get(const std::string& key) const {
  auto it = entries.find(key);
  if (it == entries.end()) throw Error("manifest has no key '" + key + "'");
  return it->second;
}

double FixtureManifest::number(const std::string& key) const {
  const auto& v = get(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw Error("manifest key '" + key + "' is not numeric: " + v);
  }
}

std::string FixtureManifest::text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries) os << k << " = " << v << '\n';
  return os.str();
}

FixtureManifest FixtureManifest::parse(const std::string& text) {
  FixtureManifest m;
  std::istringstream is(text);
  std::string line;
  int no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw Error("manifest line " + std::to_string(no) + " is not 'key = value'");
    m.entries[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

FixtureDataset heldout_dataset(const FixtureManifest& manifest) {
  return generate_dataset(Domain::outline, static_cast<std::size_t>(manifest.number("heldout_per_class")),
                          std::stoull(manifest.get("seed_heldout")));
}

FixtureBundle build_fixtures(const FixtureBuildConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto say = [&](const std::string& msg) {
    if (cfg.verbose)
      std::cerr << "[fixtures " << std::chrono::duration<double>(clock::now() - t0).count() << "s] " << msg << '\n';
  };
  FixtureBundle fb;
  auto& m = fb.manifest;
  const std::uint64_t s_cls = mix_seed(cfg.seed, 1), s_fill = mix_seed(cfg.seed, 2), s_out = mix_seed(cfg.seed, 3),
                      s_held = mix_seed(cfg.seed, 4), s_heldf = mix_seed(cfg.seed, 5);
  m.set("seed", std::to_string(cfg.seed));
  m.set("seed_classifier_data", std::to_string(s_cls));
  m.set("seed_denoiser_filled", std::to_string(s_fill));
  m.set("seed_denoiser_outline", std::to_string(s_out));
  m.set("seed_heldout", std::to_string(s_held));
  m.set("heldout_per_class", static_cast<double>(cfg.heldout_per_class));
  m.set("classifier_domain", "outline");

  auto cls_data = generate_dataset(Domain::outline, cfg.classifier_per_class, s_cls);
  auto den_fill = generate_dataset(Domain::filled, cfg.denoiser_filled_per_class, s_fill);
  auto den_out = generate_dataset(Domain::outline, cfg.denoiser_outline_per_class, s_out);
  auto held = generate_dataset(Domain::outline, cfg.heldout_per_class, s_held);
  auto held_fill = generate_dataset(Domain::filled, cfg.heldout_per_class, s_heldf);
  m.set("dataset_classifier_hash", cls_data.hash());
  m.set("dataset_denoiser_filled_hash", den_fill.hash());
  m.set("dataset_denoiser_outline_hash", den_out.hash());
  m.set("dataset_heldout_hash", held.hash());
  m.set("dataset_classifier_images", static_cast<double>(cls_data.size()));
  say("datasets ready");

  TrainLog clog;
  fb.classifier = train_classifier(cls_data, cfg.classifier, mix_seed(cfg.seed, 10), &clog);
  m.set("classifier_accuracy_train", clog.accuracy);
  m.set("classifier_accuracy_heldout", classifier_accuracy(fb.classifier, held.images, held.labels));
  m.set("classifier_accuracy_filled", classifier_accuracy(fb.classifier, held_fill.images, held_fill.labels));
  m.set("classifier_hash", hash_parameters(fb.classifier.parameters()));
  say("classifier trained, accuracy " + m.get("classifier_accuracy_heldout"));

  // Domain separability: same architecture, two outputs.
  {
    FixtureDataset dom;
    dom.images = concat({held.images, held_fill.images}, 0);
    dom.labels.assign(held.size(), 0);
    dom.labels.insert(dom.labels.end(), held_fill.size(), 1);
    ClassifierTrainConfig dc = cfg.classifier;
    dc.epochs = 2;
    dc.model.num_classes = 2;
    auto dmodel = train_classifier(dom, dc, mix_seed(cfg.seed, 11));
    auto test_o = generate_dataset(Domain::outline, 20, mix_seed(cfg.seed, 12));
    auto test_f = generate_dataset(Domain::filled, 20, mix_seed(cfg.seed, 13));
    std::vector<std::int64_t> dl(test_o.size(), 0);
    dl.insert(dl.end(), test_f.size(), 1);
    m.set("domain_separability", classifier_accuracy(dmodel, concat({test_o.images, test_f.images}, 0), dl));
  }

  fb.vocab = fixture_vocabulary(cfg.embed_dim, mix_seed(cfg.seed, 6));
  m.set("vocabulary_hash", hash_parameters({{"vocab", fb.vocab.table()}}));
  const NoiseSchedule sched = make_schedule();
  auto den_data = merge_for_denoiser({&den_fill, &den_out});
  TrainLog dlog;
  fb.denoiser = train_denoiser(den_data, fb.vocab, sched, cfg.denoiser, mix_seed(cfg.seed, 20), &dlog);
  m.set("denoiser_loss_first", dlog.epoch_loss.front());
  m.set("denoiser_loss_final", dlog.epoch_loss.back());
  m.set("denoiser_hash", hash_parameters(fb.denoiser.parameters()));
  say("denoiser trained, loss " + m.get("denoiser_loss_first") + " -> " + m.get("denoiser_loss_final"));

  if (cfg.learned_codec) {
    FixtureDataset both;
    both.images = den_data.x0;
    both.labels = den_data.labels;
    TrainLog alog;
    fb.codec = train_codec(both, cfg.codec, mix_seed(cfg.seed, 30), &alog);
    m.set("codec_reconstruction_error", reconstruction_error(*fb.codec, held.images));
    m.set("codec_reconstruction_threshold", 0.05);
    m.set("codec_latent_scale", fb.codec->latent_scale());
    m.set("codec_hash", hash_parameters(fb.codec->parameters()));
    say("codec trained, error " + m.get("codec_reconstruction_error"));
    DenoiserData lat = den_data;
    {
      NoGradGuard guard;
      lat.x0 = fb.codec->encode(den_data.x0);
    }
    DenoiserTrainConfig lc = cfg.latent_denoiser;
    lc.model.channels = fb.codec->config().latent_channels;
    lc.model.size = fb.codec->config().size / 4;
    TrainLog llog;
    fb.latent_denoiser = train_denoiser(lat, fb.vocab, sched, lc, mix_seed(cfg.seed, 31), &llog);
    m.set("latent_denoiser_loss_final", llog.epoch_loss.back());
    m.set("latent_denoiser_hash", hash_parameters(fb.latent_denoiser->parameters()));
    say("latent denoiser trained");
  }

  // Unguided class-conditional agreement on 64 samples.
  {
    std::size_t agree = 0, total = 0;
    const int C = static_cast<int>(shape_classes().size());
    for (int c = 0; c < C; ++c) {
      const std::size_t count = 64 / C + (c < 64 % C ? 1 : 0);
      auto res = sample(fb.denoiser, fb.identity, sched, class_condition(fb.vocab, c), mix_seed(cfg.seed, 40 + c), count);
      std::vector<std::int64_t> y(count, c);
      agree += static_cast<std::size_t>(std::lround(classifier_accuracy(fb.classifier, classifier_input(res.x0), y) * count));
      total += count;
    }
    m.set("unguided_agreement", static_cast<double>(agree) / static_cast<double>(total));
    m.set("chance_rate", 1.0 / C);
    say("unguided agreement " + m.get("unguided_agreement"));
  }

  // Largest step size at which one DAG correction still decreases L_BN.
  {
    const auto running = running_statistics(fb.classifier);
    auto seeds = seed_stream(mix_seed(cfg.seed, 50), 16);
    Tensor z = q_sample(take_rows(den_fill.images, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}), 300,
                        initial_latent({1, 16, 16}, seeds), sched);
    double chosen = 0.0;
    for (double eta : {1e-3, 3e-4, 1e-4, 3e-5, 1e-5}) {
      DagConfig dc;
      dc.lambda_bn = eta;
      dc.s_g = 1.0;
      auto step = dag_correct(z, fb.classifier, fb.identity, running, dc);
      NoGradGuard guard;
      const double after = image_bn_loss(fb.classifier, classifier_input(step.z), running).item();
      if (after < step.loss) {
        chosen = eta;
        break;
      }
    }
    m.set("dag_descent_eta", chosen);
  }

  // Split-half real-vs-real and noise feature distances.
  {
    std::vector<std::int64_t> a, b;
    for (std::size_t i = 0; i < held.size(); ++i) (i % 2 ? b : a).push_back(static_cast<std::int64_t>(i));
    Tensor fa = penultimate_features(fb.classifier, take_rows(held.images, a));
    Tensor fbt = penultimate_features(fb.classifier, take_rows(held.images, b));
    m.set("feature_distance_real_split", frechet_distance(fa, fbt).distance);
    Rng rng(mix_seed(cfg.seed, 60));
    Tensor noise = rng.normal_tensor({static_cast<std::int64_t>(a.size()), 1, 16, 16});
    for (auto& v : noise.data()) v = std::clamp(v, -1.0, 1.0);
    m.set("feature_distance_noise", frechet_distance(penultimate_features(fb.classifier, noise), fbt).distance);
    NoGradGuard guard;
    const auto running = running_statistics(fb.classifier);
    m.set("l_bn_real", image_bn_loss(fb.classifier, cls_data.images, running).item());
    m.set("l_bn_noise", image_bn_loss(fb.classifier, noise, running).item());
  }

  // No wall-clock entries: identical seeds must give identical manifests.
  say("done");
  return fb;
}

}  // namespace ddis
