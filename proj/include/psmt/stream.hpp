#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psmt/adapter.hpp"
#include "psmt/network.hpp"

namespace psmt {

// ---- corruptions ----------------------------------------------------------

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_dropout,
  rotation,
  scaling,
  shear,
  smoothing,
  contrast,
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 5;

  /// "kind@severity", used as the batch domain tag.
  std::string tag() const;
  bool operator==(const CorruptionSpec&) const = default;
};

/// The eight kinds in canonical order.
const std::vector<CorruptionKind>& all_corruptions();
std::string to_string(CorruptionKind kind);
CorruptionKind parse_corruption(const std::string& name);

/// Severity table. Meaning per kind:
///   gaussian_noise   noise std 0.1 * 2^(s-1)
///   shot_noise       std factor 0.1 * 2^(s-1), noise std = factor * sqrt(|x|)
///   impulse_dropout  per-feature drop probability 0.05 * s
///   rotation         angle 9 * s degrees in a random 2-plane
///   scaling          factor 1 + 0.2 * s (even features multiplied, odd divided)
///   shear            k = 0.15 * s, x_j += k * x_{j+1 mod D}
///   smoothing        alpha = 0.12 * s, blend with neighbour mean
///   contrast         c = 1 / (1 + 0.4 * s) around the per-sample mean
double severity_magnitude(CorruptionKind kind, int severity);

/// Applies the corruption; labels pass through and domain_tag becomes spec.tag().
Batch corrupt(const Batch& batch, const CorruptionSpec& spec, Rng& rng);

// ---- schedules ------------------------------------------------------------

enum class ScheduleMode { standard, shuffled, gradual, rounds };

std::string to_string(ScheduleMode mode);
ScheduleMode parse_schedule_mode(const std::string& name);

struct Segment {
  CorruptionSpec corruption;
  std::size_t num_batches = 1;
};

struct DomainSchedule {
  std::vector<Segment> segments;
  ScheduleMode mode = ScheduleMode::standard;
  std::size_t batch_size = 200;
  /// Number of base domains (segments per round for standard/shuffled/rounds,
  /// segments / 9 for gradual).
  std::size_t domains_per_round = 0;

  std::size_t total_batches() const;
};

/// standard: base order at severity 5. shuffled: base order permuted by `seed`.
/// gradual: each domain ramps severity 1..5..1. rounds: standard repeated `rounds` times.
DomainSchedule build_schedule(ScheduleMode mode, const std::vector<CorruptionKind>& base,
                              std::size_t batches_per_domain, std::size_t batch_size,
                              std::uint64_t seed, int rounds = 1);

// ---- source data ----------------------------------------------------------

struct SourceDataset {
  enum class Generator { gaussian_blobs, csv };
  Generator generator = Generator::gaussian_blobs;
  std::size_t num_classes = 3;
  std::size_t input_dim = 8;
  double class_separation = 4.0;
  std::uint64_t seed = 1;
  std::string csv_path;
  std::string label_column = "label";
  std::size_t train_size = 600;
  std::size_t heldout_size = 200;
};

struct SourceData {
  Batch train;
  Batch heldout;
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
  /// Train-set statistics used for standardization.
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
};

/// Labeled train and held-out splits, standardized with train statistics.
SourceData make_source(const SourceDataset& spec);

struct CsvTable {
  std::vector<std::string> feature_names;
  Matrix features;
  std::vector<int> labels;
};

/// Header row required; `label_column` holds integer labels, every other column
/// is a numeric feature. Errors name the line and column.
CsvTable read_labeled_csv(const std::string& path, const std::string& label_column);

// ---- streaming ------------------------------------------------------------

struct StreamItem {
  std::size_t segment_index = 0;
  std::size_t batch_in_segment = 0;
  std::size_t batch_index = 0;  ///< global position in the stream
  Batch batch;
};

/// Emits fresh corruptions of samples drawn from the held-out pool, reshuffling
/// the pool at every segment start. Labels ride along for metrics only.
class BatchStream {
 public:
  BatchStream(DomainSchedule schedule, Batch pool, std::uint64_t seed);

  std::optional<StreamItem> next();
  const DomainSchedule& schedule() const { return schedule_; }

 private:
  void start_segment();
  std::size_t draw_index();

  DomainSchedule schedule_;
  Batch pool_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t segment_ = 0;
  std::size_t in_segment_ = 0;
  std::size_t emitted_ = 0;
};

/// Convenience: drains a BatchStream.
std::vector<StreamItem> materialize_stream(const DomainSchedule& schedule, const Batch& pool,
                                           std::uint64_t seed);

}  // namespace psmt
