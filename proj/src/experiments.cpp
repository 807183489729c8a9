#include "ddis/experiments.hpp"

#include "ddis/evaluation.hpp"
#include "ddis/guidance.hpp"
#include "ddis/hash.hpp"
#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

CatEngines cat_engines(const FixtureBundle& fb, const NoiseSchedule& s, const DagConfig& dag) {
  CatEngines e;
  e.denoiser = &fb.denoiser;
  e.codec = &fb.identity;
  e.classifier = &fb.classifier;
  e.vocab = &fb.vocab;
  for (const auto& name : shape_classes()) e.label_ids.push_back(fb.vocab.id(name));
  e.schedule = s;
  e.dag = dag;
  return e;
}

ImageSet concat_sets(const std::vector<ImageSet>& parts) {
  ImageSet out;
  std::vector<Tensor> imgs;
  for (const auto& p : parts) {
    imgs.push_back(p.images);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = concat(imgs, 0);
  return out;
}

namespace {
template <class Fn>
ImageSet per_class(const std::vector<int>& classes, std::size_t n, Fn&& draw) {
  std::vector<ImageSet> parts;
  for (int c : classes) {
    ImageSet p;
    p.images = draw(c);
    p.labels.assign(n, c);
    parts.push_back(std::move(p));
  }
  return concat_sets(parts);
}
}  // namespace

ImageSet unguided_set(const FixtureBundle& fb, const NoiseSchedule& s, const std::vector<int>& classes,
                      std::size_t per_class_n, std::uint64_t seed, const std::string& slot0) {
  return per_class(classes, per_class_n, [&](int c) {
    auto seeds = seed_stream(mix_seed(seed, 0x5A70000 + static_cast<std::uint64_t>(c)), per_class_n);
    auto r = sample(fb.denoiser, fb.identity, s, class_condition(fb.vocab, c, slot0), seeds);
    NoGradGuard guard;
    return classifier_input(r.x0);
  });
}

ImageSet dag_set(const FixtureBundle& fb, const NoiseSchedule& s, const DagConfig& dag, const std::vector<int>& classes,
                 std::size_t per_class_n, std::uint64_t seed, const std::string& slot0) {
  return per_class(classes, per_class_n, [&](int c) {
    auto seeds = seed_stream(mix_seed(seed, 0x5A70000 + static_cast<std::uint64_t>(c)), per_class_n);
    auto r = guided_sample(fb.denoiser, fb.identity, fb.classifier, s, class_condition(fb.vocab, c, slot0), dag, seeds);
    NoGradGuard guard;
    return classifier_input(r.x0, dag.knee);
  });
}

ImageSet di_set(const ClassifierModel& classifier, const DiConfig& config, const std::vector<int>& classes,
                std::size_t per_class_n, std::uint64_t seed) {
  return per_class(classes, per_class_n, [&](int c) {
    DiConfig dc = config;
    dc.batch = per_class_n;
    return baseline_deep_inversion(classifier, c, dc, mix_seed(seed, 0xD1000 + static_cast<std::uint64_t>(c)));
  });
}

FixtureDataset reference_data(const FixtureBundle& fb) { return heldout_dataset(fb.manifest); }

Tensor reference_features(const FixtureBundle& fb) { return penultimate_features(fb.classifier, reference_data(fb).images); }

std::vector<int> all_classes() {
  std::vector<int> out;
  for (std::size_t c = 0; c < shape_classes().size(); ++c) out.push_back(static_cast<int>(c));
  return out;
}

MixtureDiffusion two_class_oracle(const NoiseSchedule& s) {
  GaussianComponent a, b;
  a.mean = Eigen::Vector2d(1.5, -0.5);
  a.cov = (Eigen::Matrix2d() << 0.30, 0.10, 0.10, 0.20).finished();
  a.weight = 0.7;
  a.label = 0;
  b.mean = Eigen::Vector2d(-1.0, 1.0);
  b.cov = (Eigen::Matrix2d() << 0.25, -0.05, -0.05, 0.35).finished();
  b.weight = 0.3;
  b.label = 1;
  return MixtureDiffusion({a, b}, s);
}

MixtureDiffusion gaussian_oracle(const NoiseSchedule& s, int dim, std::uint64_t seed) {
  Rng rng(seed);
  GaussianComponent g;
  g.mean = Eigen::VectorXd(dim);
  Eigen::MatrixXd a(dim, dim);
  for (int i = 0; i < dim; ++i) {
    g.mean(i) = rng.uniform(-1.0, 1.0);
    for (int j = 0; j < dim; ++j) a(i, j) = 0.4 * rng.normal();
  }
  g.cov = a * a.transpose() / dim + 0.2 * Eigen::MatrixXd::Identity(dim, dim);
  return MixtureDiffusion({g}, s);
}

std::string tensor_sha256(const Tensor& t) {
  Sha256 h;
  for (auto d : t.shape()) h.update(&d, sizeof d);
  h.update(t.data().data(), t.data().size() * sizeof(double));
  return h.hex();
}

}  // namespace ddis
