#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ddis/classifier.hpp"
#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/diffusion.hpp"

namespace ddis {

enum class Domain { filled, outline };
const char* domain_name(Domain d);
Domain parse_domain(const std::string& name);

/// The seven shape classes, in label order.
const std::vector<std::string>& shape_classes();

struct FixtureDataset {
  Domain domain = Domain::filled;
  Tensor images;  // [n, 1, 16, 16] in [-1, 1]
  std::vector<std::int64_t> labels;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::string hash() const;
};

/// Shapes with position, scale and (for non-symmetric classes) rotation jitter.
FixtureDataset generate_dataset(Domain domain, std::size_t per_class, std::uint64_t seed, std::int64_t side = 16);

/// Rows [start, start+count) of an [n, ...] tensor.
Tensor take_rows(const Tensor& t, const std::vector<std::int64_t>& rows);

struct TrainLog {
  std::vector<double> epoch_loss;
  double accuracy = 0.0;  // classifier only: eval-mode accuracy on the training set
};

struct ClassifierTrainConfig {
  int epochs = 6;
  std::size_t batch = 64;
  double lr = 3e-3;
  ClassifierConfig model;
};

ClassifierModel train_classifier(const FixtureDataset& data, const ClassifierTrainConfig& config, std::uint64_t seed,
                                 TrainLog* log = nullptr);

/// Eval-mode top-1 accuracy.
double classifier_accuracy(const ClassifierModel& model, const Tensor& images, const std::vector<std::int64_t>& labels);

/// Vocabulary: padding, one label token per class, then the domain tokens.
ConditioningVocabulary fixture_vocabulary(std::int64_t width, std::uint64_t seed);

struct DenoiserTrainConfig {
  int steps = 4000;
  std::size_t batch = 32;
  double lr = 2e-3;
  double null_prob = 0.1;    // whole condition replaced by the null condition
  double domain_prob = 0.5;  // first slot carries the domain token (else padding)
  DenoiserConfig model;
};

/// Training example: image (or latent) with its class and domain.
struct DenoiserData {
  Tensor x0;
  std::vector<std::int64_t> labels;
  std::vector<Domain> domains;
};

DenoiserData merge_for_denoiser(const std::vector<const FixtureDataset*>& parts);

DenoiserModel train_denoiser(const DenoiserData& data, const ConditioningVocabulary& vocab, const NoiseSchedule& s,
                             const DenoiserTrainConfig& config, std::uint64_t seed, TrainLog* log = nullptr);

struct CodecTrainConfig {
  int steps = 1500;
  std::size_t batch = 32;
  double lr = 3e-3;
  CodecConfig model{CodecKind::learned};
};

Codec train_codec(const FixtureDataset& data, const CodecTrainConfig& config, std::uint64_t seed,
                  TrainLog* log = nullptr);
double reconstruction_error(const Codec& codec, const Tensor& images);

/// Condition [slot0, label] for a class: slot0 is padding or a domain token.
Tensor class_condition(const ConditioningVocabulary& vocab, int class_id, const std::string& slot0 = "<pad>");

/// Plain-text key = value manifest.
struct FixtureManifest {
  std::map<std::string, std::string> entries;

  void set(const std::string& key, const std::string& value) { entries[key] = value; }
  void set(const std::string& key, double value);
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  bool has(const std::string& key) const { return entries.count(key) > 0; }
  std::string text() const;
  static FixtureManifest parse(const std::string& text);
};

struct FixtureBuildConfig {
  std::uint64_t seed = 20240601;
  std::size_t classifier_per_class = 400;
  std::size_t denoiser_filled_per_class = 300;
  std::size_t denoiser_outline_per_class = 100;
  std::size_t heldout_per_class = 100;
  ClassifierTrainConfig classifier;
  DenoiserTrainConfig denoiser;
  bool learned_codec = true;
  CodecTrainConfig codec;
  DenoiserTrainConfig latent_denoiser{1500, 32, 2e-3, 0.1, 0.5, {8, 4, 16, 16, 32, 32, 32, 32, 1000}};
  std::int64_t embed_dim = 32;
  bool verbose = false;
};

/// Everything the rest of the system inverts.
struct FixtureBundle {
  ClassifierModel classifier{ClassifierConfig{}, 0};
  DenoiserModel denoiser{DenoiserConfig{}, 0};
  ConditioningVocabulary vocab;
  Codec identity;
  std::optional<Codec> codec;                   // learned variant
  std::optional<DenoiserModel> latent_denoiser;  // trained on codec latents
  FixtureManifest manifest;
};

FixtureBundle build_fixtures(const FixtureBuildConfig& config);

/// Held-out real images of the classifier's domain (used as reference data).
FixtureDataset heldout_dataset(const FixtureManifest& manifest);

}  // namespace ddis
