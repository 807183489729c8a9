#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ddis/class_token.hpp"
#include "ddis/diffusion.hpp"
#include "ddis/evaluation.hpp"
#include "ddis/fixtures.hpp"
#include "ddis/guidance.hpp"

namespace ddis {

/// Flat `key = value` run configuration. Every key has a default; parsing
/// rejects keys outside the schema and values that do not fit its type.
class RunConfig {
 public:
  RunConfig();

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::string& path);

  /// Throws on unknown key or malformed value.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has_key(const std::string& key) const;

  double number(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;
  std::vector<int> integers(const std::string& key) const;

  /// Sorted `key = value` lines, one per schema key.
  std::string canonical() const;
  std::string hash() const;

  static std::vector<std::string> keys();

 private:
  std::map<std::string, std::string> values_;
};

NoiseSchedule schedule_from(const RunConfig& c);
DagConfig dag_from(const RunConfig& c);
CatTrainConfig cat_from(const RunConfig& c);
DiConfig di_from(const RunConfig& c);
KdConfig kd_from(const RunConfig& c);
FixtureBuildConfig fixture_build_from(const RunConfig& c);

}  // namespace ddis
