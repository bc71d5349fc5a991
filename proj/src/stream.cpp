#include "psmt/stream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "psmt/error.hpp"

namespace psmt {

namespace {

struct KindName {
  CorruptionKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {CorruptionKind::gaussian_noise, "gaussian_noise"},
    {CorruptionKind::shot_noise, "shot_noise"},
    {CorruptionKind::impulse_dropout, "impulse_dropout"},
    {CorruptionKind::rotation, "rotation"},
    {CorruptionKind::scaling, "scaling"},
    {CorruptionKind::shear, "shear"},
    {CorruptionKind::smoothing, "smoothing"},
    {CorruptionKind::contrast, "contrast"},
};

void check_severity(int s) {
  if (s < 1 || s > 5) throw ValidationError("severity must lie in [1, 5], got " + std::to_string(s));
}

}  // namespace

std::string CorruptionSpec::tag() const { return to_string(kind) + "@" + std::to_string(severity); }

const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> kinds = [] {
    std::vector<CorruptionKind> v;
    for (const auto& k : kKindNames) v.push_back(k.kind);
    return v;
  }();
  return kinds;
}

std::string to_string(CorruptionKind kind) {
  for (const auto& k : kKindNames)
    if (k.kind == kind) return k.name;
  throw ValidationError("unknown corruption kind");
}

CorruptionKind parse_corruption(const std::string& name) {
  for (const auto& k : kKindNames)
    if (name == k.name) return k.kind;
  throw ValidationError("unknown corruption kind '" + name + "'");
}

double severity_magnitude(CorruptionKind kind, int s) {
  check_severity(s);
  const double sev = static_cast<double>(s);
  switch (kind) {
    case CorruptionKind::gaussian_noise:
    case CorruptionKind::shot_noise:
      return 0.1 * std::ldexp(1.0, s - 1);
    case CorruptionKind::impulse_dropout:
      return 0.05 * sev;
    case CorruptionKind::rotation:
      return 9.0 * sev;
    case CorruptionKind::scaling:
      return 1.0 + 0.2 * sev;
    case CorruptionKind::shear:
      return 0.15 * sev;
    case CorruptionKind::smoothing:
      return 0.12 * sev;
    case CorruptionKind::contrast:
      return 1.0 / (1.0 + 0.4 * sev);
  }
  throw ValidationError("unknown corruption kind");
}

Batch corrupt(const Batch& batch, const CorruptionSpec& spec, Rng& rng) {
  const double mag = severity_magnitude(spec.kind, spec.severity);
  Batch out{batch.inputs, batch.labels, spec.tag()};
  Matrix& x = out.inputs;
  const std::size_t dim = x.cols();
  std::normal_distribution<double> normal(0.0, 1.0);

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise:
      for (double& v : x.data()) v += mag * normal(rng);
      break;
    case CorruptionKind::shot_noise:
      for (double& v : x.data()) v += mag * std::sqrt(std::abs(v)) * normal(rng);
      break;
    case CorruptionKind::impulse_dropout: {
      std::bernoulli_distribution drop(mag);
      for (double& v : x.data())
        if (drop(rng)) v = 0.0;
      break;
    }
    case CorruptionKind::rotation: {
      if (dim < 2) break;
      // Random orthonormal pair (u, v) spanning the rotation plane.
      std::vector<double> u(dim), w(dim);
      for (auto& a : u) a = normal(rng);
      for (auto& a : w) a = normal(rng);
      const double un = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
      for (auto& a : u) a /= un;
      const double proj = std::inner_product(u.begin(), u.end(), w.begin(), 0.0);
      for (std::size_t i = 0; i < dim; ++i) w[i] -= proj * u[i];
      const double wn = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      for (auto& a : w) a /= wn;
      const double theta = mag * std::numbers::pi / 180.0;
      const double c = std::cos(theta), s = std::sin(theta);
      for (std::size_t b = 0; b < x.rows(); ++b) {
        auto r = x.row(b);
        const double a = std::inner_product(r.begin(), r.end(), u.begin(), 0.0);
        const double e = std::inner_product(r.begin(), r.end(), w.begin(), 0.0);
        const double da = (a * c - e * s) - a;
        const double de = (a * s + e * c) - e;
        for (std::size_t i = 0; i < dim; ++i) r[i] += da * u[i] + de * w[i];
      }
      break;
    }
    case CorruptionKind::scaling:
      for (std::size_t b = 0; b < x.rows(); ++b) {
        auto r = x.row(b);
        for (std::size_t i = 0; i < dim; ++i) r[i] = i % 2 == 0 ? r[i] * mag : r[i] / mag;
      }
      break;
    case CorruptionKind::shear:
      for (std::size_t b = 0; b < x.rows(); ++b) {
        const std::vector<double> orig(x.row(b).begin(), x.row(b).end());
        auto r = x.row(b);
        for (std::size_t i = 0; i < dim; ++i) r[i] = orig[i] + mag * orig[(i + 1) % dim];
      }
      break;
    case CorruptionKind::smoothing:
      for (std::size_t b = 0; b < x.rows(); ++b) {
        const std::vector<double> orig(x.row(b).begin(), x.row(b).end());
        auto r = x.row(b);
        for (std::size_t i = 0; i < dim; ++i) {
          const double nb = 0.5 * (orig[(i + dim - 1) % dim] + orig[(i + 1) % dim]);
          r[i] = (1.0 - mag) * orig[i] + mag * nb;
        }
      }
      break;
    case CorruptionKind::contrast:
      for (std::size_t b = 0; b < x.rows(); ++b) {
        auto r = x.row(b);
        const double m = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(dim);
        for (double& v : r) v = m + mag * (v - m);
      }
      break;
  }
  return out;
}

// ---- schedules ------------------------------------------------------------

std::string to_string(ScheduleMode mode) {
  switch (mode) {
    case ScheduleMode::standard: return "standard";
    case ScheduleMode::shuffled: return "shuffled";
    case ScheduleMode::gradual: return "gradual";
    case ScheduleMode::rounds: return "rounds";
  }
  return "?";
}

ScheduleMode parse_schedule_mode(const std::string& name) {
  for (auto m : {ScheduleMode::standard, ScheduleMode::shuffled, ScheduleMode::gradual,
                 ScheduleMode::rounds})
    if (to_string(m) == name) return m;
  throw ValidationError("unknown schedule mode '" + name + "'");
}

std::size_t DomainSchedule::total_batches() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.num_batches;
  return n;
}

DomainSchedule build_schedule(ScheduleMode mode, const std::vector<CorruptionKind>& base,
                              std::size_t batches_per_domain, std::size_t batch_size,
                              std::uint64_t seed, int rounds) {
  Violations v;
  if (base.empty()) v.add("corruption list is empty");
  if (batch_size < 2) v.add("batch_size must be >= 2");
  if (batches_per_domain < 1) v.add("batches_per_domain must be >= 1");
  if (mode == ScheduleMode::rounds && rounds < 1) v.add("rounds must be >= 1");
  v.throw_if_any("invalid schedule");

  DomainSchedule sched;
  sched.mode = mode;
  sched.batch_size = batch_size;
  sched.domains_per_round = base.size();

  std::vector<CorruptionKind> order = base;
  if (mode == ScheduleMode::shuffled) {
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const int reps = mode == ScheduleMode::rounds ? rounds : 1;
  for (int r = 0; r < reps; ++r) {
    for (auto kind : order) {
      if (mode == ScheduleMode::gradual) {
        for (int s : {1, 2, 3, 4, 5, 4, 3, 2, 1})
          sched.segments.push_back({{kind, s}, batches_per_domain});
      } else {
        sched.segments.push_back({{kind, 5}, batches_per_domain});
      }
    }
  }
  return sched;
}

// ---- source data ----------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

void standardize(SourceData& data) {
  const std::size_t dim = data.input_dim;
  const std::size_t n = data.train.size();
  data.feature_mean.assign(dim, 0.0);
  data.feature_std.assign(dim, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < dim; ++j) data.feature_mean[j] += data.train.inputs(b, j);
  for (double& m : data.feature_mean) m /= static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = data.train.inputs(b, j) - data.feature_mean[j];
      data.feature_std[j] += d * d;
    }
  for (double& s : data.feature_std) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s == 0.0) s = 1.0;
  }
  for (Batch* batch : {&data.train, &data.heldout})
    for (std::size_t b = 0; b < batch->size(); ++b)
      for (std::size_t j = 0; j < dim; ++j)
        batch->inputs(b, j) = (batch->inputs(b, j) - data.feature_mean[j]) / data.feature_std[j];
}

Batch gather(const Matrix& features, const std::vector<int>& labels,
             const std::vector<std::size_t>& idx, const std::string& tag) {
  Batch b{Matrix(idx.size(), features.cols()), std::vector<int>(idx.size()), tag};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(features.row(idx[i]).begin(), features.cols(), b.inputs.row(i).begin());
    (*b.labels)[i] = labels[idx[i]];
  }
  return b;
}

SourceData blobs(const SourceDataset& spec) {
  Violations v;
  if (spec.num_classes < 2) v.add("num_classes must be >= 2");
  if (spec.input_dim < 1) v.add("input_dim must be >= 1");
  if (spec.train_size < spec.num_classes) v.add("train_size must cover every class");
  if (spec.heldout_size < 1) v.add("heldout_size must be >= 1");
  if (!(spec.class_separation >= 0.0)) v.add("class_separation must be >= 0");
  v.throw_if_any("invalid gaussian_blobs source");

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t dim = spec.input_dim;
  const std::size_t classes = spec.num_classes;

  // Class means sep * u_c with u_c orthonormal when classes <= dim, random unit otherwise.
  std::vector<std::vector<double>> units;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> u(dim);
    for (auto& a : u) a = normal(rng);
    if (c < dim)
      for (const auto& prev : units) {
        const double p = std::inner_product(u.begin(), u.end(), prev.begin(), 0.0);
        for (std::size_t i = 0; i < dim; ++i) u[i] -= p * prev[i];
      }
    const double norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
    for (auto& a : u) a /= norm;
    units.push_back(std::move(u));
  }
  std::vector<std::vector<double>> means = units;
  for (auto& m : means)
    for (auto& a : m) a *= spec.class_separation;

  auto sample_split = [&](std::size_t n, const std::string& tag) {
    Batch b{Matrix(n, dim), std::vector<int>(n), tag};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % classes;
      (*b.labels)[i] = static_cast<int>(c);
      for (std::size_t j = 0; j < dim; ++j) b.inputs(i, j) = means[c][j] + normal(rng);
    }
    return b;
  };

  SourceData data;
  data.num_classes = classes;
  data.input_dim = dim;
  data.train = sample_split(spec.train_size, "source");
  data.heldout = sample_split(spec.heldout_size, "source");
  return data;
}

SourceData from_csv(const SourceDataset& spec) {
  CsvTable table = read_labeled_csv(spec.csv_path, spec.label_column);
  const std::size_t need = spec.train_size + spec.heldout_size;
  if (table.labels.size() < need)
    throw ValidationError(spec.csv_path + ": " + std::to_string(table.labels.size()) +
                          " rows, but train_size + heldout_size = " + std::to_string(need));

  // Stratified round-robin over classes after a seeded shuffle within each class.
  Rng rng(spec.seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < table.labels.size(); ++i) by_class[table.labels[i]].push_back(i);
  for (auto& [label, idx] : by_class) std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::size_t> interleaved;
  for (std::size_t k = 0; interleaved.size() < table.labels.size(); ++k)
    for (auto& [label, idx] : by_class)
      if (k < idx.size()) interleaved.push_back(idx[k]);

  const std::vector<std::size_t> train_idx(interleaved.begin(),
                                           interleaved.begin() + spec.train_size);
  const std::vector<std::size_t> held_idx(interleaved.begin() + spec.train_size,
                                          interleaved.begin() + need);
  SourceData data;
  data.num_classes = static_cast<std::size_t>(by_class.rbegin()->first) + 1;
  data.input_dim = table.features.cols();
  data.train = gather(table.features, table.labels, train_idx, "source");
  data.heldout = gather(table.features, table.labels, held_idx, "source");
  return data;
}

}  // namespace

CsvTable read_labeled_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV file " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path + ": missing header row");
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end())
    throw ValidationError(path + ": no label column named '" + label_column + "'");
  const auto label_pos = static_cast<std::size_t>(label_it - header.begin());

  CsvTable table;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (i != label_pos) table.feature_names.push_back(header[i]);
  if (table.feature_names.empty()) throw ValidationError(path + ": no feature columns");

  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ValidationError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " columns, found " +
                            std::to_string(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::string cell = trim(cells[i]);
      const std::string where =
          path + ":" + std::to_string(line_no) + ": column '" + header[i] + "'";
      if (cell.empty()) throw ValidationError(where + ": missing value");
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      if (i == label_pos) {
        int label = 0;
        auto [p, ec] = std::from_chars(first, last, label);
        if (ec != std::errc() || p != last || label < 0)
          throw ValidationError(where + ": label '" + cell + "' is not a non-negative integer");
        table.labels.push_back(label);
      } else {
        double x = 0.0;
        auto [p, ec] = std::from_chars(first, last, x);
        if (ec != std::errc() || p != last || !std::isfinite(x))
          throw ValidationError(where + ": '" + cell + "' is not a finite number");
        values.push_back(x);
      }
    }
  }
  const std::size_t dim = table.feature_names.size();
  table.features = Matrix(table.labels.size(), dim);
  std::copy(values.begin(), values.end(), table.features.data().begin());
  return table;
}

SourceData make_source(const SourceDataset& spec) {
  SourceData data = spec.generator == SourceDataset::Generator::gaussian_blobs ? blobs(spec)
                                                                               : from_csv(spec);
  standardize(data);
  return data;
}

// ---- streaming ------------------------------------------------------------

BatchStream::BatchStream(DomainSchedule schedule, Batch pool, std::uint64_t seed)
    : schedule_(std::move(schedule)), pool_(std::move(pool)), rng_(seed) {
  if (pool_.size() == 0) throw ValidationError("BatchStream: held-out pool is empty");
  order_.resize(pool_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (!schedule_.segments.empty()) start_segment();
}

void BatchStream::start_segment() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::size_t BatchStream::draw_index() {
  if (cursor_ == order_.size()) start_segment();
  return order_[cursor_++];
}

std::optional<StreamItem> BatchStream::next() {
  while (segment_ < schedule_.segments.size() &&
         in_segment_ == schedule_.segments[segment_].num_batches) {
    ++segment_;
    in_segment_ = 0;
    if (segment_ < schedule_.segments.size()) start_segment();
  }
  if (segment_ >= schedule_.segments.size()) return std::nullopt;

  const std::size_t bs = schedule_.batch_size;
  const std::size_t dim = pool_.inputs.cols();
  Batch clean{Matrix(bs, dim), std::nullopt, "clean"};
  if (pool_.labels) clean.labels.emplace(bs);
  for (std::size_t i = 0; i < bs; ++i) {
    const std::size_t src = draw_index();
    std::copy_n(pool_.inputs.row(src).begin(), dim, clean.inputs.row(i).begin());
    if (pool_.labels) (*clean.labels)[i] = (*pool_.labels)[src];
  }

  StreamItem item;
  item.segment_index = segment_;
  item.batch_in_segment = in_segment_;
  item.batch_index = emitted_;
  item.batch = corrupt(clean, schedule_.segments[segment_].corruption, rng_);
  ++in_segment_;
  ++emitted_;
  return item;
}

std::vector<StreamItem> materialize_stream(const DomainSchedule& schedule, const Batch& pool,
                                           std::uint64_t seed) {
  BatchStream stream(schedule, pool, seed);
  std::vector<StreamItem> items;
  items.reserve(schedule.total_batches());
  while (auto item = stream.next()) items.push_back(std::move(*item));
  return items;
}

}  // namespace psmt
