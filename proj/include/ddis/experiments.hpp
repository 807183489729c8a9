#pragma once

#include <string>
#include <vector>

#include "ddis/class_token.hpp"
#include "ddis/config.hpp"
#include "ddis/fixtures.hpp"
#include "ddis/oracle.hpp"

namespace ddis {

/// Shared building blocks of the CLI and the acceptance harness.

/// Frozen engines for CAT/DAG: pixel-space denoiser with the identity codec.
CatEngines cat_engines(const FixtureBundle& fb, const NoiseSchedule& s, const DagConfig& dag);

struct ImageSet {
  Tensor images;  // [n, 1, 16, 16] in classifier range
  std::vector<std::int64_t> labels;
};

ImageSet concat_sets(const std::vector<ImageSet>& parts);

/// Plain class-conditional sampling with CFG (the unguided-diffusion baseline).
ImageSet unguided_set(const FixtureBundle& fb, const NoiseSchedule& s, const std::vector<int>& classes,
                      std::size_t per_class, std::uint64_t seed, const std::string& slot0 = "<pad>");
/// Class-conditional sampling with DAG but without a CAT.
ImageSet dag_set(const FixtureBundle& fb, const NoiseSchedule& s, const DagConfig& dag, const std::vector<int>& classes,
                 std::size_t per_class, std::uint64_t seed, const std::string& slot0 = "<pad>");
/// Pixel-space inversion baseline.
ImageSet di_set(const ClassifierModel& classifier, const DiConfig& config, const std::vector<int>& classes,
                std::size_t per_class, std::uint64_t seed);

/// Penultimate features of the held-out real images (the reference set of metric reports).
Tensor reference_features(const FixtureBundle& fb);
FixtureDataset reference_data(const FixtureBundle& fb);

std::vector<int> all_classes();

/// Two well-separated 2-D Gaussian classes; class 1 carries 30% of the mass.
MixtureDiffusion two_class_oracle(const NoiseSchedule& s);
/// One full-covariance Gaussian in `dim` dimensions (seeded).
MixtureDiffusion gaussian_oracle(const NoiseSchedule& s, int dim, std::uint64_t seed);

std::string tensor_sha256(const Tensor& t);

}  // namespace ddis
