#pragma once

#include <string>
#include <vector>

#include "psmt/harness/experiment.hpp"

namespace psmt::harness {

/// Shortest round-trip decimal form.
std::string format_double(double v);

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

void write_snapshot_csv(const FisherSnapshot& snap, const std::string& path);
FisherSnapshot read_snapshot_csv(const std::string& path);
/// Loads every fisher/<method>_seed<S>_seg<K>.csv under a run directory, sorted
/// by (method, seed, segment).
std::vector<FisherSnapshot> load_snapshots(const std::string& run_dir);

/// |topk(a) ∩ topk(b)| / k with k = max(1, round(fraction * n)). Ties are broken
/// by lower index.
double top_k_retention(const std::vector<double>& a, const std::vector<double>& b,
                       double fraction);

struct RetentionRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t from_segment = 0;
  std::size_t to_segment = 0;
  double top1 = 0.0;
  double top5 = 0.0;
};

/// Retention for each consecutive snapshot pair of each (method, seed). When
/// `out_dir` is non-empty, writes retention.csv and one delta CSV (b - a) per pair.
std::vector<RetentionRow> export_fisher_report(const std::vector<FisherSnapshot>& snapshots,
                                               const std::string& out_dir);

/// Mean top-5% retention over all boundaries of one (method, seed).
double mean_top5_retention(const std::vector<RetentionRow>& rows, const std::string& method,
                           std::uint64_t seed);

/// Reads metrics.csv and writes error_by_batch.dat, error_by_segment.dat and
/// error.gp (gnuplot script) into `out_dir`.
void write_plot_files(const std::string& metrics_csv, const std::string& out_dir);

}  // namespace psmt::harness
