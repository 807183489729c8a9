#include "ddis/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "ddis/checkpoint.hpp"
#include "ddis/config.hpp"
#include "ddis/evaluation.hpp"
#include "ddis/experiments.hpp"
#include "ddis/guidance.hpp"
#include "ddis/io.hpp"
#include "ddis/ops.hpp"
#include "ddis/oracle.hpp"
#include "ddis/random.hpp"

namespace ddis {

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  // Worker threads inherit the caller's precision and grad mode (both thread-local).
  const Precision prec = precision();
  const bool grad = grad_enabled();
  std::mutex m;
  std::size_t next = 0;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      PrecisionGuard pg(prec);
      std::optional<NoGradGuard> ng;
      if (!grad) ng.emplace();
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(m);
          if (next >= n || failure) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

struct UsageError : Error {
  using Error::Error;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<int> parse_class_list(const std::string& s) {
  std::vector<int> out;
  if (s.empty() || s == "all") return all_classes();
  std::istringstream is(s);
  std::string part;
  const int n = static_cast<int>(shape_classes().size());
  while (std::getline(is, part, ',')) {
    int c = -1;
    for (int k = 0; k < n; ++k)
      if (shape_classes()[static_cast<std::size_t>(k)] == part) c = k;
    if (c < 0) {
      try {
        c = std::stoi(part);
      } catch (const std::exception&) {
        throw UsageError("unknown class '" + part + "'");
      }
    }
    if (c < 0 || c >= n) throw UsageError("class id " + part + " out of range");
    out.push_back(c);
  }
  return out;
}

std::string labels_csv(const std::vector<std::int64_t>& labels, const std::vector<SynthEntry>* entries = nullptr) {
  std::string out = entries ? "index,label,class,seed\n" : "index,label,class\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(labels[i]) + "," + shape_classes()[static_cast<std::size_t>(labels[i])];
    if (entries) out += "," + std::to_string((*entries)[i].seed);
    out += "\n";
  }
  return out;
}

std::vector<std::int64_t> read_labels(const std::string& path) {
  std::istringstream is(read_text(path));
  std::string line;
  std::getline(is, line);  // header
  std::vector<std::int64_t> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    if (a == std::string::npos) throw Error("'" + path + "': malformed label row '" + line + "'");
    out.push_back(std::stoll(line.substr(a + 1, b - a - 1)));
  }
  return out;
}

/// State shared by every subcommand: resolved config, output directory and the run manifest.
class Run {
 public:
  Run(RunConfig cfg, std::string out, std::size_t jobs) : cfg_(std::move(cfg)), out_(std::move(out)), jobs_(jobs) {}

  const RunConfig& cfg() const { return cfg_; }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(cfg_.integer("seed")); }
  std::size_t jobs() const { return jobs_; }
  std::string path(const std::string& name) const { return (std::filesystem::path(out_) / name).string(); }

  const FixtureBundle& bundle() {
    if (!bundle_) {
      const auto& p = cfg_.get("checkpoint");
      bundle_ = bundle_from_checkpoint(load_checkpoint(p));
      manifest_.set("checkpoint_sha256", file_sha256(p));
    }
    return *bundle_;
  }

  void note(const std::string& key, const std::string& value) { manifest_.set(key, value); }
  void note(const std::string& key, double value) { manifest_.set(key, fmt(value)); }

  void write(const std::string& name, const std::string& text) {
    write_text(path(name), text);
    track(name);
  }
  void write_tensor(const std::string& name, const Tensor& t) {
    write_raw(path(name), t);
    track(name);
  }
  void write_grid(const std::string& name, const Tensor& images) {
    write_pgm_grid(path(name), images);
    track(name);
  }
  void track(const std::string& name) { manifest_.set("file." + name + ".sha256", file_sha256(path(name))); }

  void finish(const std::string& command) {
    manifest_.set("command", command);
    manifest_.set("config_hash", cfg_.hash());
    manifest_.set("seed", std::to_string(seed()));
    manifest_.set("precision", cfg_.get("precision"));
    write_text(path("config.cfg"), cfg_.canonical());
    write_text(path("manifest.txt"), manifest_.text());
  }

 private:
  RunConfig cfg_;
  std::string out_;
  std::size_t jobs_;
  std::optional<FixtureBundle> bundle_;
  FixtureManifest manifest_;
};

const Codec& pick_codec(Run& run, const DenoiserModel*& den) {
  const auto& fb = run.bundle();
  const auto& which = run.cfg().get("sample.codec");
  if (which == "identity") {
    den = &fb.denoiser;
    return fb.identity;
  }
  if (which == "learned") {
    if (!fb.codec || !fb.latent_denoiser) throw Error("checkpoint has no learned codec");
    den = &*fb.latent_denoiser;
    return *fb.codec;
  }
  throw UsageError("sample.codec must be identity or learned");
}

// sample / guided-sample share everything except the corrector.
void cmd_sample(Run& run, bool guided) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const auto s = schedule_from(cfg);
  const int c = static_cast<int>(cfg.integer("sample.class"));
  if (c < 0 || c >= static_cast<int>(shape_classes().size())) throw UsageError("sample.class out of range");
  const auto count = static_cast<std::size_t>(cfg.integer("sample.count"));
  if (count == 0) throw UsageError("sample.count must be positive");
  const DenoiserModel* den = nullptr;
  const Codec& codec = pick_codec(run, den);
  const Tensor cond = class_condition(fb.vocab, c, cfg.get("sample.domain"));
  const auto seeds = seed_stream(run.seed(), count);
  const DagConfig dag = dag_from(cfg);

  Tensor x0;
  if (guided) {
    // DAG couples the batch through its statistics, so it runs as one batch.
    x0 = guided_sample(*den, codec, fb.classifier, s, cond, dag, seeds).x0;
  } else {
    std::vector<Tensor> parts(run.jobs());
    const std::size_t chunk = (count + parts.size() - 1) / parts.size();
    parallel_for(parts.size(), run.jobs(), [&](std::size_t j) {
      const std::size_t lo = std::min(count, j * chunk), hi = std::min(count, lo + chunk);
      if (lo < hi) parts[j] = sample(*den, codec, s, cond, std::span(seeds).subspan(lo, hi - lo)).x0;
    });
    std::vector<Tensor> kept;
    for (auto& p : parts)
      if (p.size() > 0) kept.push_back(p);
    x0 = concat(kept, 0);
  }
  NoGradGuard guard;
  const Tensor shown = classifier_input(x0, dag.knee);
  run.write_tensor("samples.raw", x0);
  run.write_grid("samples.pgm", shown);
  run.note("images_sha256", tensor_sha256(x0));
  run.note("class", shape_classes()[static_cast<std::size_t>(c)]);
  std::vector<std::int64_t> y(count, c);
  const double agree = classifier_accuracy(fb.classifier, shown, y);
  const double lbn = image_bn_loss(fb.classifier, shown, running_statistics(fb.classifier)).item();
  run.note("agreement", agree);
  run.note("l_bn", lbn);
  if (guided) run.note("eta", dag.eta());
  std::cout << (guided ? "guided-sample" : "sample") << ": " << count << " images of "
            << shape_classes()[static_cast<std::size_t>(c)] << ", agreement " << agree << ", L_BN " << lbn << "\n";
  run.finish(guided ? "guided-sample" : "sample");
}

std::string cat_log_csv(const std::map<int, TokenEmbedding>& tokens) {
  std::string out = "class,epoch,mean_ce,correct_fraction\n";
  for (const auto& [c, t] : tokens)
    for (const auto& e : t.log)
      out += shape_classes()[static_cast<std::size_t>(c)] + "," + std::to_string(e.epoch) + "," + fmt(e.mean_ce) + "," +
             fmt(e.correct_fraction) + "\n";
  return out;
}

void save_tokens(Run& run, const std::map<int, TokenEmbedding>& tokens) {
  Checkpoint ck;
  const std::string h = run.cfg().hash();
  for (const auto& [c, t] : tokens) {
    ck.put(to_record(t, h, "token." + shape_classes()[static_cast<std::size_t>(c)]));
    run.note("token." + shape_classes()[static_cast<std::size_t>(c)] + ".sha256", tensor_sha256(t.vectors));
  }
  save_checkpoint(ck, run.path("tokens.ddis"));
  run.track("tokens.ddis");
  run.write("cat_log.csv", cat_log_csv(tokens));
}

std::map<int, TokenEmbedding> load_tokens(const std::string& path) {
  std::map<int, TokenEmbedding> out;
  if (path.empty()) return out;
  for (const auto& r : load_checkpoint(path).records) {
    if (r.kind != RecordKind::token) continue;
    auto t = token_from_record(r);
    out[t.class_id] = std::move(t);
  }
  return out;
}

void cmd_cat_optimize(Run& run, const std::string& classes) {
  const auto& fb = run.bundle();
  const auto engines = cat_engines(fb, schedule_from(run.cfg()), dag_from(run.cfg()));
  const auto config = cat_from(run.cfg());
  const auto list = parse_class_list(classes);
  const std::string before = frozen_hash(engines);
  std::map<int, TokenEmbedding> tokens;
  std::vector<TokenEmbedding> slots(list.size());
  parallel_for(list.size(), run.jobs(), [&](std::size_t i) { slots[i] = optimize_cat(list[i], engines, config); });
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& t = slots[i];
    std::cout << "cat " << shape_classes()[static_cast<std::size_t>(list[i])] << ": " << t.log.size() << " epochs, correct "
              << (t.log.empty() ? 0.0 : t.log.back().correct_fraction) << "\n";
    tokens[list[i]] = t;
  }
  run.note("frozen_hash_before", before);
  run.note("frozen_hash_after", frozen_hash(engines));
  save_tokens(run, tokens);
  run.finish("cat optimize");
}

void cmd_synthesize(Run& run, const std::string& classes, const std::string& token_path) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const auto engines = cat_engines(fb, schedule_from(cfg), dag_from(cfg));
  const auto config = cat_from(cfg);
  auto list = parse_class_list(classes.empty() ? "" : classes);
  if (classes.empty() && !cfg.integers("synth.classes").empty()) list = cfg.integers("synth.classes");
  const auto per_class = static_cast<std::size_t>(cfg.integer("synth.per_class"));
  const auto batch = static_cast<std::size_t>(cfg.integer("synth.batch"));
  const auto given = load_tokens(token_path);

  std::vector<SynthesisResult> parts(list.size());
  parallel_for(list.size(), run.jobs(), [&](std::size_t i) {
    std::map<int, TokenEmbedding> pre;
    if (auto it = given.find(list[i]); it != given.end()) pre.insert(*it);
    parts[i] = ddis_synthesize({list[i]}, engines, config, per_class, run.seed(), pre, batch);
  });

  std::vector<Tensor> imgs;
  std::vector<std::int64_t> labels;
  std::vector<SynthEntry> entries;
  std::map<int, TokenEmbedding> tokens;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    imgs.push_back(parts[i].images);
    labels.insert(labels.end(), parts[i].labels.begin(), parts[i].labels.end());
    entries.insert(entries.end(), parts[i].entries.begin(), parts[i].entries.end());
    for (auto& [c, t] : parts[i].tokens) tokens[c] = t;
    run.write_grid("class_" + shape_classes()[static_cast<std::size_t>(list[i])] + ".pgm", parts[i].images);
  }
  const Tensor images = concat(imgs, 0);
  run.write_tensor("images.raw", images);
  run.write("labels.csv", labels_csv(labels, &entries));
  save_tokens(run, tokens);

  const auto rep = metric_report(images, labels, fb.classifier, reference_features(fb));
  run.write("metrics.csv", metric_csv_header(shape_classes().size()) + metric_csv_row("ddis", rep));
  run.note("images_sha256", tensor_sha256(images));
  run.note("feature_distance", rep.feature_distance);
  run.note("mean_confidence", rep.mean_confidence);
  run.note("agreement", rep.agreement);
  std::cout << "synthesize: " << images.dim(0) << " images, feature distance " << rep.feature_distance
            << ", confidence " << rep.mean_confidence << ", agreement " << rep.agreement << "\n";
  run.finish("synthesize");
}

ImageSet baseline_set(Run& run, const std::string& name, const std::vector<int>& classes, std::size_t per_class) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  if (name == "unguided") return unguided_set(fb, schedule_from(cfg), classes, per_class, run.seed());
  if (name == "dag") return dag_set(fb, schedule_from(cfg), dag_from(cfg), classes, per_class, run.seed());
  if (name == "di") return di_set(fb.classifier, di_from(cfg), classes, per_class, run.seed());
  if (name == "real") {
    auto d = generate_dataset(Domain::outline, per_class, mix_seed(run.seed(), 0x4EA1));
    ImageSet s;
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < d.labels.size(); ++i)
      if (std::find(classes.begin(), classes.end(), d.labels[i]) != classes.end()) {
        rows.push_back(static_cast<std::int64_t>(i));
        s.labels.push_back(d.labels[i]);
      }
    s.images = take_rows(d.images, rows);
    return s;
  }
  throw UsageError("unknown image source '" + name + "' (expected real, unguided, dag or di)");
}

std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

void cmd_eval_report(Run& run, const std::string& images, const std::string& labels, const std::string& sources) {
  const auto& fb = run.bundle();
  const auto per_class = static_cast<std::size_t>(run.cfg().integer("synth.per_class"));
  const Tensor ref = reference_features(fb);
  std::string csv = metric_csv_header(shape_classes().size());
  if (!images.empty()) {
    if (labels.empty()) throw UsageError("--images needs --labels");
    const auto rep = metric_report(read_raw(images), read_labels(labels), fb.classifier, ref);
    csv += metric_csv_row("input", rep);
    std::cout << "input: feature distance " << rep.feature_distance << ", confidence " << rep.mean_confidence << "\n";
  }
  for (const auto& name : split_names(sources)) {
    const auto set = baseline_set(run, name, all_classes(), per_class);
    const auto rep = metric_report(set.images, set.labels, fb.classifier, ref);
    csv += metric_csv_row(name, rep);
    std::cout << name << ": feature distance " << rep.feature_distance << ", confidence " << rep.mean_confidence << "\n";
  }
  run.write("report.csv", csv);
  run.finish("eval report");
}

void cmd_eval_dfkd(Run& run, const std::string& images, const std::string& labels, const std::string& sources) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const auto kd = kd_from(cfg);
  ClassifierConfig student = fb.classifier.config();
  student.widths.clear();
  for (int w : cfg.integers("kd.student_widths")) student.widths.push_back(w);
  const auto eval = reference_data(fb);
  const auto per_class = static_cast<std::size_t>(cfg.integer("synth.per_class"));
  std::string csv = "source,images,temperature,accuracy\n";
  auto row = [&](const std::string& name, const Tensor& x) {
    const auto r = dfkd_train_student(fb.classifier, student, x, kd, eval.images, eval.labels, mix_seed(run.seed(), 0xCD), name);
    csv += name + "," + std::to_string(x.dim(0)) + "," + fmt(kd.temperature) + "," + fmt(r.accuracy) + "\n";
    std::cout << "dfkd " << name << ": student accuracy " << r.accuracy << "\n";
  };
  if (!images.empty()) row("input", read_raw(images));
  (void)labels;
  for (const auto& name : split_names(sources)) row(name, baseline_set(run, name, all_classes(), per_class).images);
  run.write("dfkd.csv", csv);
  run.finish("eval dfkd");
}

void cmd_bn_stability(Run& run) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const int c = static_cast<int>(cfg.integer("bn_study.class"));
  const auto study = bn_stability_study(fb.denoiser, fb.identity, fb.classifier, schedule_from(cfg),
                                        class_condition(fb.vocab, c), static_cast<std::size_t>(cfg.integer("bn_study.n")),
                                        run.seed());
  run.write("bn_stability.csv", study.csv());
  run.write("bn_stability_summary.csv", study.summary_csv());
  std::cout << study.summary_csv();
  run.finish("eval bn-stability");
}

void cmd_oracle_check(Run& run, const std::string& target, int cls, int dim) {
  const auto& cfg = run.cfg();
  OracleCheckConfig oc;
  oc.sample_steps = static_cast<int>(cfg.integer("oracle.sample_steps"));
  oc.mode = cfg.get("oracle.sigma") == "ddpm" ? SigmaMode::ddpm_matched : SigmaMode::deterministic;
  oc.samples = static_cast<std::size_t>(cfg.integer("oracle.samples"));
  oc.seed = run.seed();
  oc.target_class = cls;
  const auto s = make_schedule(static_cast<int>(cfg.integer("schedule.train_steps")), cfg.number("schedule.beta_start"),
                               cfg.number("schedule.beta_end"), oc.sample_steps, oc.mode, 1.0);
  std::optional<MixtureDiffusion> mix;
  if (target == "mixture") mix.emplace(two_class_oracle(s));
  else if (target == "gaussian") mix.emplace(gaussian_oracle(s, dim, run.seed()));
  else throw UsageError("--target must be mixture or gaussian");
  const auto r = oracle_sample_check(*mix, oc);
  std::string csv = "quantity,i,j,sample,target,band,discretized,within_band\n";
  const auto d = r.mean.size();
  for (Eigen::Index i = 0; i < d; ++i)
    csv += "mean," + std::to_string(i) + ",," + fmt(r.mean(i)) + "," + fmt(r.target_mean(i)) + "," + fmt(r.mean_band(i)) +
           "," + (r.has_exact ? fmt(r.exact_mean(i)) : "") + "," +
           (std::abs(r.mean(i) - r.target_mean(i)) <= r.mean_band(i) ? "1" : "0") + "\n";
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      csv += "cov," + std::to_string(i) + "," + std::to_string(j) + "," + fmt(r.cov(i, j)) + "," + fmt(r.target_cov(i, j)) +
             "," + fmt(r.cov_band(i, j)) + "," + (r.has_exact ? fmt(r.exact_cov(i, j)) : "") + "," +
             (std::abs(r.cov(i, j) - r.target_cov(i, j)) <= r.cov_band(i, j) ? "1" : "0") + "\n";
  run.write("oracle.csv", csv);
  run.note("mean_within_band", r.mean_ok ? "1" : "0");
  run.note("cov_within_band", r.cov_ok ? "1" : "0");
  if (r.has_exact) {
    run.note("discretized_mean_within_band", r.exact_mean_ok ? "1" : "0");
    run.note("discretized_cov_within_band", r.exact_cov_ok ? "1" : "0");
  }
  std::cout << "oracle check (" << target << ", " << r.samples << " samples, " << r.steps << " steps): mean "
            << (r.mean_ok ? "within" : "OUTSIDE") << " band, covariance " << (r.cov_ok ? "within" : "OUTSIDE") << " band";
  if (r.has_exact)
    std::cout << "; vs discretized law: mean " << (r.exact_mean_ok ? "within" : "OUTSIDE") << ", covariance "
              << (r.exact_cov_ok ? "within" : "OUTSIDE");
  std::cout << "\n";
  run.finish("oracle check");
}

void cmd_sweep(Run& run) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const int c = static_cast<int>(cfg.integer("sweep.class"));
  const auto seeds = seed_stream(run.seed(), static_cast<std::size_t>(cfg.integer("sweep.batch")));
  const auto cells = sweep_dag(fb.denoiser, fb.identity, fb.classifier, schedule_from(cfg), class_condition(fb.vocab, c),
                               cfg.numbers("sweep.lambda_bn"), cfg.numbers("sweep.s_g"), seeds);
  std::string csv = "lambda_bn,s_g,eta,final_l_bn,mean_step_l_bn,pixel_mean,pixel_std\n";
  for (const auto& k : cells)
    csv += fmt(k.lambda_bn) + "," + fmt(k.s_g) + "," + fmt(k.eta) + "," + fmt(k.final_l_bn) + "," + fmt(k.mean_step_l_bn) +
           "," + fmt(k.pixel_mean) + "," + fmt(k.pixel_std) + "\n";
  run.write("sweep.csv", csv);
  std::cout << csv;
  run.finish("sweep dag");
}

void cmd_ablate(Run& run, const std::string& what, const std::string& classes) {
  const auto& fb = run.bundle();
  const auto& cfg = run.cfg();
  const auto engines = cat_engines(fb, schedule_from(cfg), dag_from(cfg));
  const auto base = cat_from(cfg);
  const auto list = parse_class_list(classes);
  struct Variant {
    std::string ablation, name;
    CatTrainConfig config;
  };
  std::vector<Variant> variants;
  auto want = [&](const std::string& w) { return what == "all" || what == w; };
  if (!want("tokens") && !want("bn-loss") && !want("unfreeze"))
    throw UsageError("--what must be tokens, bn-loss, unfreeze or all");
  if (want("tokens"))
    for (int k : {0, 1, 2}) {
      auto c = base;
      c.extra_token_count = k;
      variants.push_back({"tokens", std::to_string(1 + k), c});
    }
  if (want("bn-loss"))
    for (double w : {0.0, 0.01, 0.1}) {
      auto c = base;
      c.bn_loss_weight = w;
      variants.push_back({"bn-loss", fmt(w), c});
    }
  if (want("unfreeze")) {
    auto c = base;
    c.unfreeze_denoiser = true;
    variants.push_back({"unfreeze", "on", c});
  }
  struct Cell {
    std::string status = "ok";
    TokenEmbedding token;
  };
  std::vector<Cell> cells(variants.size() * list.size());
  parallel_for(cells.size(), run.jobs(), [&](std::size_t i) {
    const auto& v = variants[i / list.size()];
    try {
      cells[i].token = optimize_cat(list[i % list.size()], engines, v.config);
    } catch (const NumericError&) {
      throw;
    } catch (const Error& e) {
      cells[i].status = std::string("rejected: ") + e.what();
    }
  });
  std::string csv = "ablation,variant,class,epochs,final_ce,final_correct,status\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& v = variants[i / list.size()];
    const auto& t = cells[i].token;
    const bool ok = cells[i].status == "ok" && !t.log.empty();
    std::string status = cells[i].status;
    std::replace(status.begin(), status.end(), ',', ';');
    csv += v.ablation + "," + v.name + "," + shape_classes()[static_cast<std::size_t>(list[i % list.size()])] + "," +
           (ok ? std::to_string(t.log.size()) : "") + "," + (ok ? fmt(t.log.back().mean_ce) : "") + "," +
           (ok ? fmt(t.log.back().correct_fraction) : "") + "," + status + "\n";
  }
  run.write("ablation.csv", csv);
  std::cout << csv;
  run.finish("ablate");
}

void cmd_fixtures_build(Run& run, bool seed_given) {
  RunConfig cfg = run.cfg();
  auto build = fixture_build_from(cfg);
  if (seed_given) build.seed = run.seed();
  build.verbose = true;
  const auto fb = build_fixtures(build);
  save_checkpoint(to_checkpoint(fb), run.path("fixtures.ddis"));
  run.track("fixtures.ddis");
  for (const auto& [k, v] : fb.manifest.entries) run.note("fixture." + k, v);
  std::cout << "fixtures written to " << run.path("fixtures.ddis") << "\n";
  run.finish("fixtures build");
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Data-free image synthesis toolkit: fixtures, samplers, guidance and evaluation."};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out = "out", prec, checkpoint;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Run configuration (key = value per line)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Run seed");
  app.add_option("--out", out, "Output directory");
  app.add_option("--precision", prec, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--jobs", jobs, "Worker threads for independent samples")->check(CLI::PositiveNumber);
  app.add_option("--checkpoint", checkpoint, "Fixture checkpoint to load");
  app.add_option("--set", sets, "Override a config key (key=value), repeatable");

  auto* fixtures = app.add_subcommand("fixtures", "Fixture datasets and models");
  fixtures->require_subcommand(1);
  auto* fixtures_build = fixtures->add_subcommand("build", "Generate datasets, train the frozen networks, write a checkpoint");

  int cls = -1;
  std::size_t count = 0;
  std::string domain;
  auto* sample_cmd = app.add_subcommand("sample", "Plain class-conditional sampling with classifier-free guidance");
  auto* guided_cmd = app.add_subcommand("guided-sample", "Sampling with domain alignment guidance");
  for (auto* sc : {sample_cmd, guided_cmd}) {
    sc->add_option("--class", cls, "Class id");
    sc->add_option("--count", count, "Number of images");
    sc->add_option("--domain", domain, "First conditioning slot (<pad>, filled or outline)");
  }

  std::string classes, tokens, images, labels, sources;
  auto* cat = app.add_subcommand("cat", "Class alignment tokens");
  cat->require_subcommand(1);
  auto* cat_opt = cat->add_subcommand("optimize", "Optimize one token per class");
  cat_opt->add_option("--classes", classes, "Comma-separated class names or ids (default all)");

  auto* synth = app.add_subcommand("synthesize", "Token optimization plus guided sampling for every class");
  synth->add_option("--classes", classes, "Comma-separated class names or ids");
  synth->add_option("--tokens", tokens, "Reuse tokens from a previous run")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluation harnesses");
  eval->require_subcommand(1);
  auto* report = eval->add_subcommand("report", "Metric report (confidence, feature distance, L_BN)");
  auto* dfkd = eval->add_subcommand("dfkd", "Distill a student from the frozen classifier on an image set");
  for (auto* sc : {report, dfkd}) {
    sc->add_option("--images", images, "Raw image dump")->check(CLI::ExistingFile);
    sc->add_option("--labels", labels, "Label CSV")->check(CLI::ExistingFile);
    sc->add_option("--sources", sources, "Generated comparison sets: real, unguided, dag, di");
  }
  auto* bn = eval->add_subcommand("bn-stability", "Layer statistics of decoded predictions across timesteps");

  std::string target = "mixture";
  int dim = 2;
  auto* oracle = app.add_subcommand("oracle", "Analytic Gaussian-mixture oracle");
  oracle->require_subcommand(1);
  auto* oracle_check = oracle->add_subcommand("check", "Sampler moments against exact targets");
  oracle_check->add_option("--target", target, "mixture or gaussian");
  oracle_check->add_option("--class", cls, "Condition on a class (-1: unconditional)");
  oracle_check->add_option("--dim", dim, "Dimension of the gaussian target")->check(CLI::Range(1, 8));

  auto* sweep = app.add_subcommand("sweep", "Parameter sweeps");
  sweep->require_subcommand(1);
  auto* sweep_dag_cmd = sweep->add_subcommand("dag", "lambda_bn x s_g grid");

  std::string what = "all";
  auto* ablate = app.add_subcommand("ablate", "Token-count, BN-loss and unfreeze ablations of token optimization");
  ablate->add_option("--what", what, "tokens, bn-loss, unfreeze or all");
  ablate->add_option("--classes", classes, "Classes (default all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!prec.empty()) cfg.set("precision", prec);
    if (!checkpoint.empty()) cfg.set("checkpoint", checkpoint);
    if ((sample_cmd->parsed() || guided_cmd->parsed()) && cls >= 0) cfg.set("sample.class", std::to_string(cls));
    if (count > 0) cfg.set("sample.count", std::to_string(count));
    if (!domain.empty()) cfg.set("sample.domain", domain);
    const auto& p = cfg.get("precision");
    if (p != "f32" && p != "f64") throw UsageError("precision must be f32 or f64");
    PrecisionGuard pg(p == "f32" ? Precision::f32 : Precision::f64);

    ensure_dir(out);
    Run run(cfg, out, jobs);
    if (fixtures_build->parsed()) cmd_fixtures_build(run, seed.has_value());
    else if (sample_cmd->parsed()) cmd_sample(run, false);
    else if (guided_cmd->parsed()) cmd_sample(run, true);
    else if (cat_opt->parsed()) cmd_cat_optimize(run, classes);
    else if (synth->parsed()) cmd_synthesize(run, classes, tokens);
    else if (report->parsed()) cmd_eval_report(run, images, labels, sources.empty() && images.empty() ? "real,unguided,di" : sources);
    else if (dfkd->parsed()) cmd_eval_dfkd(run, images, labels, sources.empty() && images.empty() ? "real,unguided,di" : sources);
    else if (bn->parsed()) cmd_bn_stability(run);
    else if (oracle_check->parsed()) cmd_oracle_check(run, target, cls, dim);
    else if (sweep_dag_cmd->parsed()) cmd_sweep(run);
    else if (ablate->parsed()) cmd_ablate(run, what, classes);
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ddis
