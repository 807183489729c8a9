#include "ddis/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ddis/class_token.hpp"
#include "ddis/fixtures.hpp"
#include "ddis/guidance.hpp"
#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

namespace {

std::vector<std::int64_t> range_rows(std::int64_t start, std::int64_t count) {
  std::vector<std::int64_t> rows(static_cast<std::size_t>(count));
  std::iota(rows.begin(), rows.end(), start);
  return rows;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.ndim() != 2) throw ShapeError("expected [n, F] features, got " + to_string(t.shape()));
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
  return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Tensor penultimate_features(const ClassifierModel& model, const Tensor& images, std::size_t chunk) {
  NoGradGuard guard;
  const std::int64_t n = images.dim(0);
  std::vector<Tensor> parts;
  for (std::int64_t s = 0; s < n; s += static_cast<std::int64_t>(chunk)) {
    const std::int64_t c = std::min<std::int64_t>(static_cast<std::int64_t>(chunk), n - s);
    parts.push_back(model.forward(take_rows(images, range_rows(s, c))).features);
  }
  return concat(parts, 0);
}

FrechetResult frechet_distance(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("frechet_distance: feature sets " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const Eigen::MatrixXd A = to_matrix(a), B = to_matrix(b);
  const Eigen::Index F = A.cols();
  FrechetResult r;
  auto fit = [&](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean();
    cov = Eigen::MatrixXd::Zero(F, F);
    if (x.rows() >= 2) {
      const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
      cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (x.rows() < 2 || es.eigenvalues().minCoeff() < 1e-10) {
      cov += 1e-6 * Eigen::MatrixXd::Identity(F, F);
      r.shrunk = true;
    }
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  fit(A, ma, ca);
  fit(B, mb, cb);
  const Eigen::MatrixXd sa = psd_sqrt(ca);
  const Eigen::MatrixXd mid = sa * cb * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  r.distance = std::max(0.0, (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross);
  return r;
}

Tensor softmax_probabilities(const ClassifierModel& classifier, const Tensor& images) {
  NoGradGuard guard;
  const std::int64_t n = images.dim(0);
  std::vector<Tensor> parts;
  for (std::int64_t s = 0; s < n; s += 256) {
    const std::int64_t c = std::min<std::int64_t>(256, n - s);
    parts.push_back(softmax(classifier.forward(take_rows(images, range_rows(s, c))).logits));
  }
  return concat(parts, 0);
}

MetricReport metric_report(const Tensor& images, const std::vector<std::int64_t>& labels,
                           const ClassifierModel& classifier, const Tensor& reference_features) {
  if (images.ndim() != 4 || static_cast<std::size_t>(images.dim(0)) != labels.size())
    throw ShapeError("metric_report: images " + to_string(images.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  NoGradGuard guard;
  const auto N = classifier.config().num_classes;
  MetricReport r;
  r.images = labels.size();
  Tensor probs = softmax_probabilities(classifier, images);
  std::vector<double> conf_sum(static_cast<std::size_t>(N), 0.0);
  std::vector<std::size_t> count(static_cast<std::size_t>(N), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = labels[i];
    if (y < 0 || y >= N) throw Error("metric_report: label out of range");
    const double* row = probs.data().data() + static_cast<std::int64_t>(i) * N;
    conf_sum[static_cast<std::size_t>(y)] += row[y];
    ++count[static_cast<std::size_t>(y)];
    r.mean_confidence += row[y];
    correct += static_cast<std::size_t>(std::max_element(row, row + N) - row) == static_cast<std::size_t>(y);
  }
  r.mean_confidence /= static_cast<double>(labels.size());
  r.agreement = static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::int64_t c = 0; c < N; ++c)
    r.class_confidence.push_back(count[static_cast<std::size_t>(c)]
                                     ? conf_sum[static_cast<std::size_t>(c)] / static_cast<double>(count[static_cast<std::size_t>(c)])
                                     : std::numeric_limits<double>::quiet_NaN());
  auto fr = frechet_distance(penultimate_features(classifier, images), reference_features);
  r.feature_distance = fr.distance;
  r.shrunk = fr.shrunk;
  r.l_bn = image_bn_loss(classifier, images, running_statistics(classifier)).item();
  if (!std::isfinite(r.feature_distance) || !std::isfinite(r.l_bn) || !std::isfinite(r.mean_confidence))
    throw NumericError("metric_report: non-finite metric");
  return r;
}

std::string metric_csv_header(std::size_t classes) {
  std::ostringstream os;
  os << "source,images,mean_confidence,agreement,feature_distance,shrunk,l_bn";
  for (std::size_t c = 0; c < classes; ++c) os << ",confidence_" << c;
  return os.str();
}

std::string metric_csv_row(const std::string& tag, const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << tag << ',' << r.images << ',' << r.mean_confidence << ',' << r.agreement << ',' << r.feature_distance << ','
     << (r.shrunk ? 1 : 0) << ',' << r.l_bn;
  for (double c : r.class_confidence) os << ',' << c;
  return os.str();
}

Tensor baseline_deep_inversion(const ClassifierModel& classifier, int class_id, const DiConfig& config,
                               std::uint64_t seed, std::vector<double>* ce_log) {
  if (config.iterations < 0) throw Error("deep inversion: iterations must be >= 0");
  if (class_id < 0 || class_id >= classifier.config().num_classes) throw Error("deep inversion: class out of range");
  const auto& cc = classifier.config();
  Rng rng(mix_seed(seed, 0xD1ULL + static_cast<std::uint64_t>(class_id)));
  Tensor x = rng.normal_tensor({static_cast<std::int64_t>(config.batch), cc.in_channels, cc.image_size, cc.image_size}, 0.5);
  for (auto& v : x.data()) v = std::clamp(v, -1.0, 1.0);
  const auto running = running_statistics(classifier);
  AdamOptions opts;
  opts.lr = config.lr;
  x.set_requires_grad(true);
  Adam adam({x}, opts);
  EnableGradGuard grad_on;
  auto evaluate = [&](bool with_bn) {
    auto out = classifier.forward(x, with_bn);
    Tensor ce = cross_entropy(out.logits, class_id);
    Tensor loss = ce;
    if (with_bn) loss = add(ce, mul_scalar(bn_alignment_loss(*out.stats, running), config.lambda_bn));
    return std::make_pair(ce, loss);
  };
  for (int it = 0; it < config.iterations; ++it) {
    auto [ce, loss] = evaluate(config.lambda_bn != 0.0);
    if (!std::isfinite(loss.item())) throw NumericError("deep inversion: loss diverged at iteration " + std::to_string(it));
    if (ce_log) ce_log->push_back(ce.item());
    adam.zero_grad();
    backward(loss);
    adam.step();
    for (auto& v : x.data()) v = std::clamp(v, -1.0, 1.0);
  }
  if (ce_log) {
    NoGradGuard guard;
    ce_log->push_back(cross_entropy(classifier.forward(x).logits, class_id).item());
  }
  x.zero_grad();
  return x.detach();
}

BnStabilityStudy bn_stability_study(const DenoiserModel& denoiser, const Codec& codec,
                                    const ClassifierModel& classifier, const NoiseSchedule& s, const Tensor& cond,
                                    std::size_t n, std::uint64_t seed) {
  if (n < 8) throw Error("bn_stability_study: need at least 8 trajectories");
  auto res = sample(denoiser, codec, s, cond, seed, n);
  NoGradGuard guard;
  BnStabilityStudy st;
  const std::size_t L = classifier.bn_layers();
  int k = 0;
  for (const auto& rec : res.trace.steps) {
    auto out = classifier.forward(classifier_input(codec.decode(rec.z)), true);
    std::vector<double> lm, lv;
    for (std::size_t l = 0; l < L; ++l) {
      lm.push_back(mean(out.stats->means[l]).item());
      lv.push_back(mean(out.stats->vars[l]).item());
    }
    if (!std::all_of(lm.begin(), lm.end(), [](double v) { return std::isfinite(v); }) ||
        !std::all_of(lv.begin(), lv.end(), [](double v) { return std::isfinite(v); }))
      throw NumericError("bn_stability_study: non-finite statistics at t=" + std::to_string(rec.t));
    st.steps.push_back(++k);
    st.timesteps.push_back(rec.t);
    st.layer_mean.push_back(lm);
    st.layer_var.push_back(lv);
  }
  auto cv = [&](const std::vector<std::vector<double>>& rows, std::size_t l) {
    double m = 0.0, q = 0.0;
    for (const auto& r : rows) m += r[l];
    m /= static_cast<double>(rows.size());
    for (const auto& r : rows) q += (r[l] - m) * (r[l] - m);
    return std::sqrt(q / static_cast<double>(rows.size())) / std::max(std::abs(m), 1e-12);
  };
  for (std::size_t l = 0; l < L; ++l) {
    st.cv_mean.push_back(cv(st.layer_mean, l));
    st.cv_var.push_back(cv(st.layer_var, l));
  }
  return st;
}

std::string BnStabilityStudy::csv() const {
  std::ostringstream os;
  os.precision(12);
  os << "step,t";
  const std::size_t L = cv_mean.size();
  for (std::size_t l = 0; l < L; ++l) os << ",layer" << l + 1 << "_mean,layer" << l + 1 << "_var";
  os << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) {
    os << steps[i] << ',' << timesteps[i];
    for (std::size_t l = 0; l < L; ++l) os << ',' << layer_mean[i][l] << ',' << layer_var[i][l];
    os << '\n';
  }
  return os.str();
}

std::string BnStabilityStudy::summary_csv() const {
  std::ostringstream os;
  os.precision(12);
  os << "layer,cv_mean,cv_var\n";
  for (std::size_t l = 0; l < cv_mean.size(); ++l) os << l + 1 << ',' << cv_mean[l] << ',' << cv_var[l] << '\n';
  return os.str();
}

KdResult dfkd_train_student(const ClassifierModel& teacher, const ClassifierConfig& student_config,
                            const Tensor& images, const KdConfig& config, const Tensor& eval_images,
                            const std::vector<std::int64_t>& eval_labels, std::uint64_t seed,
                            const std::string& source, const std::vector<std::int64_t>* labels) {
  if (!(config.temperature > 0.0)) throw Error("dfkd: temperature must be positive");
  if (images.ndim() != 4 || images.dim(0) < 2) throw ShapeError("dfkd: need a batch of images");
  const double T = config.temperature;
  Tensor targets;
  {
    NoGradGuard guard;
    std::vector<Tensor> parts;
    for (std::int64_t s = 0; s < images.dim(0); s += 256) {
      const std::int64_t c = std::min<std::int64_t>(256, images.dim(0) - s);
      parts.push_back(softmax(mul_scalar(teacher.forward(take_rows(images, range_rows(s, c))).logits, 1.0 / T)));
    }
    targets = concat(parts, 0);
  }
  ClassifierModel student(student_config, mix_seed(seed, 0x57ULL));
  auto params = student.parameters();
  set_trainable(params, true);
  std::vector<Tensor> leaves;
  for (auto& p : params) leaves.push_back(p.value);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam(leaves, opts);
  Rng rng(mix_seed(seed, 0x58ULL));
  const auto n = static_cast<std::size_t>(images.dim(0));
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = (n + config.batch - 1) / config.batch;
  const double total = static_cast<double>(per_epoch) * config.epochs;
  long step = 0;
  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), std::mt19937_64(rng.next()));
    for (std::size_t s = 0; s < n; s += config.batch) {
      std::vector<std::int64_t> idx(order.begin() + static_cast<long>(s),
                                    order.begin() + static_cast<long>(std::min(n, s + config.batch)));
      if (idx.size() < 2) continue;
      adam.options().lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step++) / total));
      auto out = student.train_forward(take_rows(images, idx));
      Tensor loss;
      if (config.hard_labels) {
        if (!labels) throw Error("dfkd: hard-label training needs labels");
        std::vector<std::int64_t> y;
        for (auto i : idx) y.push_back((*labels)[static_cast<std::size_t>(i)]);
        loss = cross_entropy(out.logits, y);
      } else {
        Tensor p = take_rows(targets, idx);
        Tensor logq = log_softmax(mul_scalar(out.logits, 1.0 / T));
        // KL(teacher || student) up to the teacher entropy, scaled by T^2.
        loss = mul_scalar(neg(mean(sum_axes(mul(p, logq), {1}, false))), T * T);
      }
      if (!std::isfinite(loss.item())) throw NumericError("dfkd: student loss diverged");
      adam.zero_grad();
      backward(loss);
      adam.step();
    }
  }
  set_trainable(params, false);
  KdResult r;
  r.teacher = "teacher";
  r.student = "student";
  r.source = source;
  r.accuracy = classifier_accuracy(student, eval_images, eval_labels);
  return r;
}

}  // namespace ddis
