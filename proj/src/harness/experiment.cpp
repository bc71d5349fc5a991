#include "psmt/harness/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <json.hpp>

#include "psmt/error.hpp"
#include "psmt/harness/report.hpp"

namespace psmt::harness {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t run_seed, SeedPurpose purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(run_seed), static_cast<std::uint32_t>(run_seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

DomainSchedule make_schedule(const ScheduleConfig& cfg) {
  return build_schedule(cfg.mode, cfg.corruptions, cfg.batches_per_domain, cfg.batch_size,
                        cfg.shuffle_seed, cfg.rounds);
}

SeedSetup prepare_seed(const RunConfig& cfg, std::uint64_t seed) {
  SeedSetup s;
  s.seed = seed;
  SourceDataset ds = cfg.source;
  ds.seed = derive_seed(cfg.source.seed ^ (seed * 0x100000001b3ULL), SeedPurpose::data);
  s.data = make_source(ds);
  s.source = pretrain_source(cfg.network, s.data.train, cfg.pretrain,
                             derive_seed(seed, SeedPurpose::pretrain));
  s.schedule = make_schedule(cfg.schedule);
  s.stream = materialize_stream(s.schedule, s.data.heldout, derive_seed(seed, SeedPurpose::stream));
  return s;
}

namespace {

bool is_mean_teacher(Method m) { return m == Method::plain_mt || m == Method::psmt; }

MetricsRecord base_record(const std::string& label, const SeedSetup& setup, const StreamItem& item) {
  MetricsRecord r;
  r.method = label;
  r.seed = setup.seed;
  r.segment_index = item.segment_index;
  r.domain_tag = item.batch.domain_tag;
  r.batch_index = item.batch_index;
  return r;
}

bool segment_ends(const SeedSetup& setup, const StreamItem& item) {
  return item.batch_in_segment + 1 == setup.schedule.segments[item.segment_index].num_batches;
}

}  // namespace

std::vector<MetricsRecord> run_method(const RunConfig& cfg, const SeedSetup& setup, Method method,
                                      std::vector<FisherSnapshot>* snapshots, std::string* failure,
                                      const std::string& label_in) {
  const std::string label = label_in.empty() ? to_string(method) : label_in;
  const NetworkSpec& spec = cfg.network;
  std::vector<MetricsRecord> records;
  records.reserve(setup.stream.size());
  const std::size_t source_bytes = setup.source.params.size() * sizeof(double);

  try {
    if (!is_mean_teacher(method)) {
      for (const StreamItem& item : setup.stream) {
        MetricsRecord r = base_record(label, setup, item);
        const auto t0 = std::chrono::steady_clock::now();
        const Probs p = method == Method::source ? source_only_step(setup.source, spec, item.batch)
                                                 : bn_adapt_step(setup.source, spec, item.batch);
        r.step_time_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        r.error_rate = error_rate(p, *item.batch.labels);
        r.peak_param_bytes = source_bytes;
        records.push_back(std::move(r));
      }
      return records;
    }

    Rng rng(derive_seed(setup.seed, SeedPurpose::adapter));
    MeanTeacherState state = MeanTeacherState::from_source(setup.source);
    std::size_t peak = 0;
    for (const StreamItem& item : setup.stream) {
      const Batch unlabeled{item.batch.inputs, std::nullopt, item.batch.domain_tag};
      StepResult res = method == Method::psmt
                           ? psmt_step(state, spec, unlabeled, cfg.adapter, rng)
                           : plain_mt_step(state, spec, unlabeled, cfg.adapter, rng);
      const StepDiagnostics& d = res.diagnostics;
      MetricsRecord r = base_record(label, setup, item);
      r.error_rate = error_rate(res.predictions, *item.batch.labels);
      r.loss_ce = d.loss_ce;
      r.loss_stu = d.loss_stu;
      r.loss_total = d.loss_total;
      r.mask_ones_fraction = d.mask_ones_fraction;
      r.step_time_ms = d.step_time_ms;
      peak = std::max(peak, d.resident_bytes);
      r.peak_param_bytes = peak;
      records.push_back(std::move(r));

      if (snapshots && cfg.fisher_snapshots && segment_ends(setup, item)) {
        FisherSnapshot snap{label, setup.seed, item.segment_index, {}};
        if (d.teacher_fisher) {
          const auto v = d.teacher_fisher->values.values();
          snap.values.assign(v.begin(), v.end());
        } else {
          const FisherDiag f =
              teacher_side_fisher(spec, res.state.student, res.state.stats, unlabeled, cfg.adapter);
          const auto v = f.values.values();
          snap.values.assign(v.begin(), v.end());
        }
        snapshots->push_back(std::move(snap));
      }
      state = std::move(res.state);
    }
  } catch (const NumericError& e) {
    if (!failure) throw;
    *failure = label + " seed " + std::to_string(setup.seed) + ": " + e.what();
  }
  return records;
}

RunResult run_experiment(const RunConfig& cfg) {
  cfg.validate();
  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<SeedSetup> setups(n_seeds);
  std::vector<std::exception_ptr> errors(n_seeds);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t s = 0; s < n_seeds; ++s) {
    try {
      setups[s] = prepare_seed(cfg, cfg.seeds[s]);
    } catch (...) {
      errors[s] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  struct Job {
    Method method;
    std::size_t seed_index;
    std::vector<MetricsRecord> records;
    std::vector<FisherSnapshot> snapshots;
    std::string failure;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (Method m : cfg.methods)
    for (std::size_t s = 0; s < n_seeds; ++s) jobs.push_back(Job{m, s, {}, {}, {}, nullptr});

#pragma omp parallel for schedule(dynamic)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    Job& job = jobs[j];
    try {
      job.records =
          run_method(cfg, setups[job.seed_index], job.method, &job.snapshots, &job.failure);
    } catch (...) {
      job.error = std::current_exception();
    }
  }

  RunResult result;
  for (Job& job : jobs) {
    if (job.error) std::rethrow_exception(job.error);
    std::move(job.records.begin(), job.records.end(), std::back_inserter(result.records));
    std::move(job.snapshots.begin(), job.snapshots.end(), std::back_inserter(result.snapshots));
    if (!job.failure.empty()) result.failures.push_back(job.failure);
  }
  return result;
}

double mean_error(const std::vector<MetricsRecord>& records) {
  if (records.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : records) acc += r.error_rate;
  return acc / static_cast<double>(records.size());
}

double mean_error(const std::vector<MetricsRecord>& records, const std::string& method) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.method == method) acc += r.error_rate, ++n;
  return n ? acc / static_cast<double>(n) : 0.0;
}

double mean_error(const std::vector<MetricsRecord>& records, const std::string& method,
                  std::uint64_t seed) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.method == method && r.seed == seed) acc += r.error_rate, ++n;
  return n ? acc / static_cast<double>(n) : 0.0;
}

namespace {

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) { sum += v, ++n; }
  double value() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

json build_summary(const RunResult& result) {
  std::vector<std::string> order;
  std::map<std::string, Mean> overall;
  std::map<std::string, std::map<std::uint64_t, Mean>> per_seed;
  std::map<std::string, std::map<std::size_t, std::pair<std::string, Mean>>> per_segment;
  std::map<std::string, std::vector<std::string>> domain_order;
  std::map<std::string, std::map<std::string, Mean>> per_domain;
  for (const auto& r : result.records) {
    if (!overall.count(r.method)) order.push_back(r.method);
    overall[r.method].add(r.error_rate);
    per_seed[r.method][r.seed].add(r.error_rate);
    auto& seg = per_segment[r.method][r.segment_index];
    seg.first = r.domain_tag;
    seg.second.add(r.error_rate);
    if (!per_domain[r.method].count(r.domain_tag)) domain_order[r.method].push_back(r.domain_tag);
    per_domain[r.method][r.domain_tag].add(r.error_rate);
  }
  json methods = json::object();
  for (const auto& m : order) {
    json seeds = json::object();
    for (const auto& [seed, mean] : per_seed[m]) seeds[std::to_string(seed)] = mean.value();
    json segs = json::array();
    for (const auto& [idx, seg] : per_segment[m])
      segs.push_back({{"segment_index", idx}, {"domain_tag", seg.first}, {"mean_error", seg.second.value()}});
    json domains = json::array();
    for (const auto& tag : domain_order[m])
      domains.push_back({{"domain_tag", tag}, {"mean_error", per_domain[m][tag].value()}});
    methods[m] = {{"mean_error", overall[m].value()},
                  {"batches", overall[m].n},
                  {"per_seed", seeds},
                  {"per_segment", segs},
                  {"per_domain", domains}};
  }
  return {{"methods", methods}, {"partial", result.partial()}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("write failed for " + path.string());
}

}  // namespace

void write_run(const RunConfig& cfg, const RunResult& result, const std::string& dir) {
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw ValidationError("cannot create output directory " + dir + ": " + ec.message());

  write_metrics_csv(result.records, (root / "metrics.csv").string());

  std::string timing = "method,seed,batch_index,step_time_ms\n";
  for (const auto& r : result.records)
    timing += r.method + "," + std::to_string(r.seed) + "," + std::to_string(r.batch_index) + "," +
              format_double(r.step_time_ms) + "\n";
  write_text(root / "timing.csv", timing);

  write_text(root / "summary.json", build_summary(result).dump(2) + "\n");

  json manifest = {{"artifact_version", kArtifactVersion},
                   {"metrics_schema_version", kMetricsSchemaVersion},
                   {"metrics_columns",
                    {"method", "seed", "segment_index", "domain_tag", "batch_index", "error_rate",
                     "loss_ce", "loss_stu", "loss_total", "mask_ones_fraction",
                     "peak_param_bytes"}},
                   {"seeds", cfg.seeds},
                   {"config", to_json(cfg)},
                   {"partial", result.partial()}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");

  if (!result.snapshots.empty()) {
    const fs::path fdir = root / "fisher";
    fs::create_directories(fdir, ec);
    if (ec) throw ValidationError("cannot create " + fdir.string() + ": " + ec.message());
    for (const auto& s : result.snapshots)
      write_snapshot_csv(s, (fdir / (s.method + "_seed" + std::to_string(s.seed) + "_seg" +
                                     std::to_string(s.segment_index) + ".csv"))
                                .string());
  }

  const fs::path marker = root / "PARTIAL";
  if (result.partial()) {
    std::string text;
    for (const auto& f : result.failures) text += f + "\n";
    write_text(marker, text);
  } else {
    fs::remove(marker, ec);
  }
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& out_dir) {
  std::vector<AblationRow> rows;
  std::string table = "sd,sema,mean_error,dir\n";
  for (bool sd : {false, true}) {
    for (bool sema : {false, true}) {
      RunConfig c = cfg;
      c.methods = {Method::psmt};
      c.adapter.enable_sd = sd;
      c.adapter.enable_sema = sema;
      AblationRow row;
      row.sd = sd;
      row.sema = sema;
      row.dir = std::string("sd") + (sd ? "1" : "0") + "_sema" + (sema ? "1" : "0");
      c.output_dir = (fs::path(out_dir) / row.dir).string();
      row.result = run_experiment(c);
      row.mean_error = mean_error(row.result.records);
      write_run(c, row.result, c.output_dir);
      table += std::string(sd ? "on" : "off") + "," + (sema ? "on" : "off") + "," +
               format_double(row.mean_error) + "," + row.dir + "\n";
      rows.push_back(std::move(row));
    }
  }
  write_text(fs::path(out_dir) / "ablation.csv", table);
  return rows;
}

std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::lambda: return "lambda";
    case SweepParam::xi: return "xi";
    case SweepParam::delta: return "delta";
  }
  return "?";
}

SweepParam parse_sweep_param(const std::string& name) {
  for (auto p : {SweepParam::lambda, SweepParam::xi, SweepParam::delta})
    if (to_string(p) == name) return p;
  throw ValidationError("unknown sweep parameter '" + name + "' (expected lambda, xi or delta)");
}

std::vector<SweepRow> run_sweep(const RunConfig& cfg, SweepParam param,
                                const std::vector<double>& values, const std::string& out_dir) {
  if (values.empty()) throw ValidationError("sweep: values list is empty");
  std::vector<SweepRow> rows;
  std::string table = to_string(param) + ",mean_error,dir\n";
  for (double v : values) {
    RunConfig c = cfg;
    c.methods = {Method::psmt};
    switch (param) {
      case SweepParam::lambda: c.adapter.lambda = v; break;
      case SweepParam::xi: c.adapter.xi = v; break;
      case SweepParam::delta: c.adapter.delta = v; break;
    }
    SweepRow row;
    row.value = v;
    row.dir = to_string(param) + "_" + format_double(v);
    c.output_dir = (fs::path(out_dir) / row.dir).string();
    row.result = run_experiment(c);
    row.mean_error = mean_error(row.result.records);
    write_run(c, row.result, c.output_dir);
    table += format_double(v) + "," + format_double(row.mean_error) + "," + row.dir + "\n";
    rows.push_back(std::move(row));
  }
  write_text(fs::path(out_dir) / ("sweep_" + to_string(param) + ".csv"), table);
  return rows;
}

}  // namespace psmt::harness
