#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psmt/harness/config.hpp"

namespace psmt::harness {

struct MetricsRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t segment_index = 0;
  std::string domain_tag;
  std::size_t batch_index = 0;
  double error_rate = 0.0;
  double loss_ce = 0.0;
  double loss_stu = 0.0;
  double loss_total = 0.0;
  double mask_ones_fraction = 0.0;
  double step_time_ms = 0.0;
  std::size_t peak_param_bytes = 0;
};

/// Teacher-side Fisher taken after the last batch of a segment.
struct FisherSnapshot {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t segment_index = 0;
  std::vector<double> values;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<FisherSnapshot> snapshots;
  /// One message per job that stopped on a numeric failure.
  std::vector<std::string> failures;
  bool partial() const { return !failures.empty(); }
};

/// Everything shared by the methods of one seed: data, source model and stream.
struct SeedSetup {
  std::uint64_t seed = 0;
  SourceData data;
  Model source;
  DomainSchedule schedule;
  std::vector<StreamItem> stream;
};

enum class SeedPurpose : std::uint64_t { data = 1, pretrain = 2, stream = 3, adapter = 4 };
std::uint64_t derive_seed(std::uint64_t run_seed, SeedPurpose purpose);

DomainSchedule make_schedule(const ScheduleConfig& cfg);
SeedSetup prepare_seed(const RunConfig& cfg, std::uint64_t seed);

/// Streams one method over a prepared seed. Stops at the first NumericError,
/// keeping the records produced so far and reporting the message in `failure`.
std::vector<MetricsRecord> run_method(const RunConfig& cfg, const SeedSetup& setup, Method method,
                                      std::vector<FisherSnapshot>* snapshots,
                                      std::string* failure, const std::string& label = {});

/// Runs the (method x seed) grid in memory. Jobs run in parallel; results are
/// merged in (method, seed) order regardless of completion order.
RunResult run_experiment(const RunConfig& cfg);

/// Writes metrics.csv, timing.csv, summary.json, manifest.json, fisher/*.csv and
/// a PARTIAL marker when any job failed.
void write_run(const RunConfig& cfg, const RunResult& result, const std::string& dir);

double mean_error(const std::vector<MetricsRecord>& records);
double mean_error(const std::vector<MetricsRecord>& records, const std::string& method);
double mean_error(const std::vector<MetricsRecord>& records, const std::string& method,
                  std::uint64_t seed);

// ---- ablation and sweeps --------------------------------------------------

struct AblationRow {
  bool sd = false;
  bool sema = false;
  double mean_error = 0.0;
  std::string dir;
  RunResult result;
};

/// Runs psmt with the 2x2 grid of {SD, SEMA} toggles. Writes one directory per
/// row plus ablation.csv under `out_dir`.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& out_dir);

enum class SweepParam { lambda, xi, delta };
std::string to_string(SweepParam p);
SweepParam parse_sweep_param(const std::string& name);

struct SweepRow {
  double value = 0.0;
  double mean_error = 0.0;
  std::string dir;
  RunResult result;
};

/// One psmt run per value with shared seeds. Writes sweep_<param>.csv.
std::vector<SweepRow> run_sweep(const RunConfig& cfg, SweepParam param,
                                const std::vector<double>& values, const std::string& out_dir);

}  // namespace psmt::harness
