#include "psmt/harness/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <regex>
#include <sstream>
#include <tuple>

#include "psmt/error.hpp"

namespace psmt::harness {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ValidationError(where + ": cannot parse '" + text + "'");
  return v;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  return out;
}

const char* kMetricsHeader =
    "method,seed,segment_index,domain_tag,batch_index,error_rate,loss_ce,loss_stu,loss_total,"
    "mask_ones_fraction,peak_param_bytes";

}  // namespace

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path) {
  std::ofstream out = open_out(path);
  out << kMetricsHeader << '\n';
  for (const auto& r : records)
    out << r.method << ',' << r.seed << ',' << r.segment_index << ',' << r.domain_tag << ','
        << r.batch_index << ',' << format_double(r.error_rate) << ','
        << format_double(r.loss_ce) << ',' << format_double(r.loss_stu) << ','
        << format_double(r.loss_total) << ',' << format_double(r.mask_ones_fraction) << ','
        << r.peak_param_bytes << '\n';
  if (!out) throw ValidationError("write failed for " + path);
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw ValidationError(path + ": unexpected metrics header");
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (c.size() != 11) throw ValidationError(where + ": expected 11 columns");
    MetricsRecord r;
    r.method = c[0];
    r.seed = parse_number<std::uint64_t>(c[1], where);
    r.segment_index = parse_number<std::size_t>(c[2], where);
    r.domain_tag = c[3];
    r.batch_index = parse_number<std::size_t>(c[4], where);
    r.error_rate = parse_number<double>(c[5], where);
    r.loss_ce = parse_number<double>(c[6], where);
    r.loss_stu = parse_number<double>(c[7], where);
    r.loss_total = parse_number<double>(c[8], where);
    r.mask_ones_fraction = parse_number<double>(c[9], where);
    r.peak_param_bytes = parse_number<std::size_t>(c[10], where);
    out.push_back(std::move(r));
  }
  return out;
}

void write_snapshot_csv(const FisherSnapshot& snap, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "index,fisher\n";
  for (std::size_t i = 0; i < snap.values.size(); ++i)
    out << i << ',' << format_double(snap.values[i]) << '\n';
  if (!out) throw ValidationError("write failed for " + path);
}

FisherSnapshot read_snapshot_csv(const std::string& path) {
  static const std::regex name_re(R"((.+)_seed(\d+)_seg(\d+)\.csv)");
  FisherSnapshot snap;
  std::smatch m;
  const std::string file = fs::path(path).filename().string();
  if (std::regex_match(file, m, name_re)) {
    snap.method = m[1];
    snap.seed = std::stoull(m[2]);
    snap.segment_index = std::stoull(m[3]);
  }
  std::ifstream in = open_in(path);
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 2) throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 2 columns");
    snap.values.push_back(parse_number<double>(c[1], path + ":" + std::to_string(lineno)));
  }
  return snap;
}

std::vector<FisherSnapshot> load_snapshots(const std::string& run_dir) {
  const fs::path dir = fs::path(run_dir) / "fisher";
  if (!fs::is_directory(dir)) throw ValidationError("no fisher/ directory under " + run_dir);
  std::vector<FisherSnapshot> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".csv") out.push_back(read_snapshot_csv(entry.path().string()));
  std::sort(out.begin(), out.end(), [](const FisherSnapshot& a, const FisherSnapshot& b) {
    return std::tie(a.method, a.seed, a.segment_index) < std::tie(b.method, b.seed, b.segment_index);
  });
  return out;
}

namespace {

std::vector<std::size_t> top_k_indices(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

double top_k_retention(const std::vector<double>& a, const std::vector<double>& b, double fraction) {
  if (a.size() != b.size())
    throw ValidationError("top_k_retention: snapshot lengths differ (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw ValidationError("top_k_retention: empty snapshots");
  const std::size_t k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(a.size()))), 1, a.size());
  const auto ta = top_k_indices(a, k);
  const auto tb = top_k_indices(b, k);
  std::vector<std::size_t> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

std::vector<RetentionRow> export_fisher_report(const std::vector<FisherSnapshot>& snapshots,
                                               const std::string& out_dir) {
  std::map<std::pair<std::string, std::uint64_t>, std::vector<const FisherSnapshot*>> groups;
  for (const auto& s : snapshots) groups[{s.method, s.seed}].push_back(&s);

  if (!out_dir.empty()) fs::create_directories(fs::path(out_dir) / "fisher_delta");
  std::vector<RetentionRow> rows;
  for (auto& [key, list] : groups) {
    std::sort(list.begin(), list.end(), [](auto* x, auto* y) { return x->segment_index < y->segment_index; });
    for (std::size_t i = 1; i < list.size(); ++i) {
      const FisherSnapshot& a = *list[i - 1];
      const FisherSnapshot& b = *list[i];
      if (a.values.size() != b.values.size())
        throw ValidationError("fisher report: snapshot lengths differ for " + key.first + " seed " +
                              std::to_string(key.second));
      RetentionRow row{key.first, key.second, a.segment_index, b.segment_index,
                       top_k_retention(a.values, b.values, 0.01),
                       top_k_retention(a.values, b.values, 0.05)};
      if (!out_dir.empty()) {
        std::ofstream out = open_out((fs::path(out_dir) / "fisher_delta" /
                                      (key.first + "_seed" + std::to_string(key.second) + "_seg" +
                                       std::to_string(a.segment_index) + "_to_seg" +
                                       std::to_string(b.segment_index) + ".csv"))
                                         .string());
        out << "index,delta\n";
        for (std::size_t j = 0; j < a.values.size(); ++j)
          out << j << ',' << format_double(b.values[j] - a.values[j]) << '\n';
      }
      rows.push_back(std::move(row));
    }
  }
  if (!out_dir.empty()) {
    std::ofstream out = open_out((fs::path(out_dir) / "retention.csv").string());
    out << "method,seed,from_segment,to_segment,top1_retention,top5_retention\n";
    for (const auto& r : rows)
      out << r.method << ',' << r.seed << ',' << r.from_segment << ',' << r.to_segment << ','
          << format_double(r.top1) << ',' << format_double(r.top5) << '\n';
  }
  return rows;
}

double mean_top5_retention(const std::vector<RetentionRow>& rows, const std::string& method,
                           std::uint64_t seed) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.method == method && r.seed == seed) acc += r.top5, ++n;
  return n ? acc / static_cast<double>(n) : 0.0;
}

void write_plot_files(const std::string& metrics_csv, const std::string& out_dir) {
  const auto records = read_metrics_csv(metrics_csv);
  if (records.empty()) throw ValidationError(metrics_csv + ": no records to plot");
  fs::create_directories(out_dir);

  std::vector<std::string> methods;
  std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> by_batch;
  std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> by_segment;
  for (const auto& r : records) {
    if (!by_batch.count(r.method)) methods.push_back(r.method);
    auto& b = by_batch[r.method][r.batch_index];
    b.first += r.error_rate, ++b.second;
    auto& s = by_segment[r.method][r.segment_index];
    s.first += r.error_rate, ++s.second;
  }

  auto write_table = [&](const std::string& name, const std::string& key, auto& table) {
    std::ofstream out = open_out((fs::path(out_dir) / name).string());
    out << "# " << key;
    for (const auto& m : methods) out << ' ' << m;
    out << '\n';
    for (const auto& [k, _] : table[methods.front()]) {
      out << k;
      for (const auto& m : methods) {
        const auto it = table[m].find(k);
        out << ' ' << (it == table[m].end() ? std::string("nan")
                                            : format_double(it->second.first / static_cast<double>(it->second.second)));
      }
      out << '\n';
    }
  };
  write_table("error_by_batch.dat", "batch_index", by_batch);
  write_table("error_by_segment.dat", "segment_index", by_segment);

  std::ofstream gp = open_out((fs::path(out_dir) / "error.gp").string());
  gp << "set terminal pngcairo size 900,500\n"
     << "set output 'error_by_batch.png'\n"
     << "set xlabel 'batch'\nset ylabel 'error rate'\nset key outside right\n"
     << "plot ";
  for (std::size_t i = 0; i < methods.size(); ++i)
    gp << (i ? ", " : "") << "'error_by_batch.dat' using 1:" << i + 2 << " with lines title '"
       << methods[i] << "'";
  gp << "\n";
}

}  // namespace psmt::harness
