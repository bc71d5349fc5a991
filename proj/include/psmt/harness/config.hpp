#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "psmt/adapter.hpp"
#include "psmt/network.hpp"
#include "psmt/stream.hpp"

namespace psmt::harness {

inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr int kMetricsSchemaVersion = 1;
/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "PSMT_OUT_DIR";

enum class Method { source, bn_adapt, plain_mt, psmt };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct ScheduleConfig {
  ScheduleMode mode = ScheduleMode::standard;
  std::vector<CorruptionKind> corruptions = all_corruptions();
  std::size_t batches_per_domain = 10;
  std::size_t batch_size = 200;
  int rounds = 3;
  std::uint64_t shuffle_seed = 0;
};

struct RunConfig {
  NetworkSpec network;
  SourceDataset source;
  PretrainConfig pretrain;
  ScheduleConfig schedule;
  AdapterConfig adapter;
  std::vector<Method> methods{Method::source, Method::bn_adapt, Method::plain_mt, Method::psmt};
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "psmt_out";
  /// Write teacher-side Fisher snapshots at segment boundaries for MT methods.
  bool fisher_snapshots = true;

  /// Throws ValidationError listing every violation.
  void validate() const;
};

/// Defaults: 8-dim 3-class blobs (separation 4.0), one hidden layer of 32 units
/// with batch-stat normalization, 8 corruptions at severity 5, 10 batches of 200.
RunConfig default_config();

/// Overlays a JSON document on the defaults. Unknown keys and type errors are
/// reported together.
RunConfig config_from_json(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);
nlohmann::json to_json(const RunConfig& cfg);

std::vector<std::uint64_t> parse_seed_list(const std::string& text);
std::vector<Method> parse_method_list(const std::string& text);
std::vector<double> parse_value_list(const std::string& text);

}  // namespace psmt::harness
