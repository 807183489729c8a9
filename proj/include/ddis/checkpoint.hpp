#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ddis/class_token.hpp"
#include "ddis/classifier.hpp"
#include "ddis/codec.hpp"
#include "ddis/denoiser.hpp"
#include "ddis/fixtures.hpp"

namespace ddis {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class RecordKind : std::uint8_t { classifier = 1, denoiser = 2, codec = 3, token = 4, manifest = 5 };
const char* kind_name(RecordKind k);

/// Named string attributes plus named f64 tensors.
struct Record {
  std::string name;
  RecordKind kind = RecordKind::manifest;
  std::map<std::string, std::string> attrs;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const std::string& attr(const std::string& key) const;
  const Tensor& tensor(const std::string& key) const;
  bool has_tensor(const std::string& key) const;
};

/// Container layout: "DDIS", u16 version, u32 record count, then a table of
/// (name, kind, offset, length, SHA-256) entries, then the record payloads.
struct Checkpoint {
  std::vector<Record> records;

  void put(Record r);  // replaces a record of the same name
  const Record* find(const std::string& name) const;
  const Record& get(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
/// Verifies every record hash.
Checkpoint load_checkpoint(const std::string& path);
/// Reads and verifies one record only.
Record load_record(const std::string& path, const std::string& name);
std::vector<std::pair<std::string, RecordKind>> list_records(const std::string& path);

std::string encode_payload(const Record& r);
Record decode_payload(const std::string& name, RecordKind kind, const std::string& bytes);

Record to_record(const ClassifierModel& m, const std::string& name = "classifier");
ClassifierModel classifier_from_record(const Record& r);
Record to_record(const DenoiserModel& m, const std::string& name = "denoiser");
DenoiserModel denoiser_from_record(const Record& r);
Record to_record(const ConditioningVocabulary& v, const std::string& name = "vocabulary");
ConditioningVocabulary vocabulary_from_record(const Record& r);
Record to_record(const Codec& c, const std::string& name = "codec");
Codec codec_from_record(const Record& r);
Record to_record(const TokenEmbedding& t, const std::string& config_hash, const std::string& name);
TokenEmbedding token_from_record(const Record& r);
Record to_record(const FixtureManifest& m, const std::string& name = "manifest");
FixtureManifest manifest_from_record(const Record& r);

Checkpoint to_checkpoint(const FixtureBundle& fb);
FixtureBundle bundle_from_checkpoint(const Checkpoint& ck);

}  // namespace ddis
