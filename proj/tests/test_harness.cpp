#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "psmt/error.hpp"
#include "psmt/harness/config.hpp"
#include "psmt/harness/experiment.hpp"
#include "psmt/harness/report.hpp"

using namespace psmt;
using namespace psmt::harness;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(const std::string& name) {
  RunConfig cfg = default_config();
  cfg.schedule.corruptions = {CorruptionKind::gaussian_noise, CorruptionKind::rotation,
                              CorruptionKind::contrast};
  cfg.schedule.batches_per_domain = 3;
  cfg.schedule.batch_size = 64;
  cfg.source.heldout_size = 400;
  cfg.pretrain.epochs = 5;
  cfg.seeds = {0, 1};
  cfg.output_dir = (fs::temp_directory_path() / ("psmt_harness_" + name)).string();
  fs::remove_all(cfg.output_dir);
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> errors_of(const std::vector<MetricsRecord>& records) {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.error_rate);
  return out;
}

}  // namespace

TEST(Harness, DeriveSeedSeparatesPurposes) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (auto p : {SeedPurpose::data, SeedPurpose::pretrain, SeedPurpose::stream, SeedPurpose::adapter})
      seen.insert(derive_seed(s, p));
  EXPECT_EQ(seen.size(), 16u);
  EXPECT_EQ(derive_seed(3, SeedPurpose::stream), derive_seed(3, SeedPurpose::stream));
}

TEST(Harness, SourceErrorMatchesDirectEvaluation) {
  RunConfig cfg = small_config("source");
  cfg.methods = {Method::source};
  const SeedSetup setup = prepare_seed(cfg, 0);
  const auto records = run_method(cfg, setup, Method::source, nullptr, nullptr);
  ASSERT_EQ(records.size(), setup.stream.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Batch& b = setup.stream[i].batch;
    const Probs p = forward(cfg.network, setup.source, b, ForwardMode::frozen_stats);
    std::size_t wrong = 0;
    for (std::size_t r = 0; r < b.size(); ++r) {
      const auto row = p.row(r);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      wrong += static_cast<int>(pred) != (*b.labels)[r];
    }
    EXPECT_DOUBLE_EQ(records[i].error_rate, static_cast<double>(wrong) / b.size());
    EXPECT_EQ(records[i].domain_tag, b.domain_tag);
  }
}

TEST(Harness, RunsAreByteIdentical) {
  RunConfig cfg = small_config("repeat");
  const RunResult a = run_experiment(cfg);
  write_run(cfg, a, cfg.output_dir + "/a");
  const RunResult b = run_experiment(cfg);
  write_run(cfg, b, cfg.output_dir + "/b");
  EXPECT_FALSE(a.partial());
  EXPECT_EQ(slurp(cfg.output_dir + "/a/metrics.csv"), slurp(cfg.output_dir + "/b/metrics.csv"));
  EXPECT_EQ(slurp(cfg.output_dir + "/a/summary.json"), slurp(cfg.output_dir + "/b/summary.json"));
  ASSERT_EQ(a.snapshots.size(), b.snapshots.size());
  for (std::size_t i = 0; i < a.snapshots.size(); ++i)
    EXPECT_EQ(a.snapshots[i].values, b.snapshots[i].values);
  EXPECT_FALSE(fs::exists(cfg.output_dir + "/a/PARTIAL"));
}

TEST(Harness, RecordOrderAndKeysAreUnique) {
  RunConfig cfg = small_config("keys");
  const RunResult r = run_experiment(cfg);
  const std::size_t per_run = 3 * cfg.schedule.batches_per_domain;
  ASSERT_EQ(r.records.size(), cfg.methods.size() * cfg.seeds.size() * per_run);
  std::set<std::tuple<std::string, std::uint64_t, std::size_t>> keys;
  for (const auto& rec : r.records) {
    EXPECT_TRUE(keys.emplace(rec.method, rec.seed, rec.batch_index).second);
    EXPECT_GE(rec.error_rate, 0.0);
    EXPECT_LE(rec.error_rate, 1.0);
  }
  // (method, seed) blocks in configuration order
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const std::size_t block = i / per_run;
    EXPECT_EQ(r.records[i].method, to_string(cfg.methods[block / cfg.seeds.size()]));
    EXPECT_EQ(r.records[i].seed, cfg.seeds[block % cfg.seeds.size()]);
    EXPECT_EQ(r.records[i].batch_index, i % per_run);
  }
  // one snapshot per segment per MT job
  EXPECT_EQ(r.snapshots.size(), 2 * cfg.seeds.size() * 3);
}

TEST(Harness, SummaryIsRecomputableFromMetrics) {
  RunConfig cfg = small_config("summary");
  const RunResult r = run_experiment(cfg);
  write_run(cfg, r, cfg.output_dir);
  const auto records = read_metrics_csv(cfg.output_dir + "/metrics.csv");
  ASSERT_EQ(records.size(), r.records.size());
  const auto summary = nlohmann::json::parse(slurp(cfg.output_dir + "/summary.json"));
  for (Method m : cfg.methods) {
    const std::string name = to_string(m);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& rec : records)
      if (rec.method == name) sum += rec.error_rate, ++n;
    EXPECT_NEAR(summary["methods"][name]["mean_error"].get<double>(), sum / n, 1e-12);
    EXPECT_NEAR(mean_error(r.records, name), sum / n, 1e-12);
  }
  const auto manifest = nlohmann::json::parse(slurp(cfg.output_dir + "/manifest.json"));
  EXPECT_EQ(manifest["artifact_version"], kArtifactVersion);
  EXPECT_EQ(config_from_json(manifest["config"]).adapter.lambda, cfg.adapter.lambda);
  EXPECT_FALSE(load_snapshots(cfg.output_dir).empty());
}

TEST(Harness, MetricsCsvRoundTrips) {
  MetricsRecord rec{"psmt", 7, 2, "rotation@5", 11, 0.125, 0.1 + 0.2, 1e-300, 3.0, 0.97, 0.0, 536};
  const std::string path = (fs::temp_directory_path() / "psmt_rt.csv").string();
  write_metrics_csv({rec}, path);
  const auto back = read_metrics_csv(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].method, rec.method);
  EXPECT_EQ(back[0].seed, rec.seed);
  EXPECT_EQ(back[0].domain_tag, rec.domain_tag);
  EXPECT_EQ(back[0].loss_ce, rec.loss_ce);
  EXPECT_EQ(back[0].loss_stu, rec.loss_stu);
  EXPECT_EQ(back[0].peak_param_bytes, rec.peak_param_bytes);
}

TEST(Harness, AblationGrid) {
  RunConfig cfg = small_config("ablation");
  cfg.seeds = {0};
  const auto rows = run_ablation(cfg, cfg.output_dir);
  ASSERT_EQ(rows.size(), 4u);
  std::set<std::pair<bool, bool>> seen;
  for (const auto& row : rows) {
    seen.emplace(row.sd, row.sema);
    EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / row.dir / "metrics.csv"));
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / "ablation.csv"));

  RunConfig plain = cfg;
  plain.methods = {Method::plain_mt};
  const RunResult p = run_experiment(plain);
  EXPECT_FALSE(rows[0].sd || rows[0].sema);
  EXPECT_EQ(errors_of(rows[0].result.records), errors_of(p.records));
}

TEST(Harness, SweepRowsAndZeroLambda) {
  RunConfig cfg = small_config("sweep");
  cfg.seeds = {0};
  const auto lam = run_sweep(cfg, SweepParam::lambda, {0, 100, 500, 2000}, cfg.output_dir);
  ASSERT_EQ(lam.size(), 4u);
  EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / "sweep_lambda.csv"));
  const auto xi = run_sweep(cfg, SweepParam::xi, {0.01, 0.03, 0.1, 0.3}, cfg.output_dir);
  ASSERT_EQ(xi.size(), 4u);
  for (const auto& row : xi) EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / row.dir));

  RunConfig no_sd = cfg;
  no_sd.methods = {Method::psmt};
  no_sd.adapter.enable_sd = false;
  const RunResult r = run_experiment(no_sd);
  ASSERT_EQ(lam[0].value, 0.0);
  EXPECT_EQ(errors_of(lam[0].result.records), errors_of(r.records));

  EXPECT_THROW(run_sweep(cfg, SweepParam::lambda, {}, cfg.output_dir), ValidationError);
  EXPECT_THROW(parse_sweep_param("gamma"), ValidationError);
}

TEST(Harness, RetentionOfIdenticalSnapshotsIsOne) {
  std::vector<double> v(200);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(static_cast<double>(i) * 1.7) + 1.0;
  const std::vector<FisherSnapshot> snaps{{"psmt", 0, 0, v}, {"psmt", 0, 1, v}};
  const std::string dir = (fs::temp_directory_path() / "psmt_retention").string();
  fs::remove_all(dir);
  const auto rows = export_fisher_report(snaps, dir);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].top1, 1.0);
  EXPECT_EQ(rows[0].top5, 1.0);
  EXPECT_EQ(mean_top5_retention(rows, "psmt", 0), 1.0);
  std::ifstream delta(fs::path(dir) / "fisher_delta" / "psmt_seed0_seg0_to_seg1.csv");
  ASSERT_TRUE(delta);
  std::string line;
  std::getline(delta, line);
  std::size_t n = 0;
  while (std::getline(delta, line)) {
    EXPECT_EQ(std::stod(line.substr(line.find(',') + 1)), 0.0);
    ++n;
  }
  EXPECT_EQ(n, v.size());
  EXPECT_TRUE(fs::exists(fs::path(dir) / "retention.csv"));
}

TEST(Harness, RetentionBoundsAndErrors) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(97), b(97);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    for (double f : {0.01, 0.05, 0.5, 1.0}) {
      const double r = top_k_retention(a, b, f);
      EXPECT_GE(r, 0.0);
      EXPECT_LE(r, 1.0);
    }
    EXPECT_EQ(top_k_retention(a, b, 1.0), 1.0);
  }
  EXPECT_EQ(top_k_retention({1, 2, 3, 4}, {4, 3, 2, 1}, 0.25), 0.0);
  EXPECT_EQ(top_k_retention({1, 1, 1, 1}, {1, 1, 1, 1}, 0.5), 1.0);
  EXPECT_THROW(top_k_retention({1, 2}, {1, 2, 3}, 0.5), ValidationError);
}

TEST(Harness, PlotFilesAreWritten) {
  RunConfig cfg = small_config("plot");
  cfg.seeds = {0};
  write_run(cfg, run_experiment(cfg), cfg.output_dir);
  write_plot_files(cfg.output_dir + "/metrics.csv", cfg.output_dir + "/plot");
  for (const char* f : {"error_by_batch.dat", "error_by_segment.dat", "error.gp"})
    EXPECT_GT(fs::file_size(fs::path(cfg.output_dir) / "plot" / f), 0u) << f;
}

TEST(Config, DefaultsValidateAndRoundTrip) {
  RunConfig cfg = default_config();
  cfg.output_dir = (fs::temp_directory_path() / "psmt_cfg").string();
  EXPECT_NO_THROW(cfg.validate());
  const RunConfig back = config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(Config, UnknownKeysAreRejected) {
  try {
    config_from_json(nlohmann::json::parse(R"({"adapter": {"lamda": 5}, "extra": 1})"));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lamda"), std::string::npos);
    EXPECT_NE(msg.find("extra"), std::string::npos);
  }
}

TEST(Config, AllViolationsReportedTogether) {
  RunConfig cfg = default_config();
  cfg.output_dir = (fs::temp_directory_path() / "psmt_cfg_bad").string();
  cfg.adapter.xi = 1.5;
  cfg.adapter.delta = -0.1;
  cfg.schedule.batch_size = 1;
  cfg.seeds.clear();
  try {
    cfg.validate();
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    for (const char* key : {"xi", "delta", "batch_size", "seed"})
      EXPECT_NE(msg.find(key), std::string::npos) << key << " missing from: " << msg;
  }
}

TEST(Config, ListParsing) {
  EXPECT_EQ(parse_seed_list("0,1, 2"), (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(parse_method_list("psmt,source"), (std::vector<Method>{Method::psmt, Method::source}));
  EXPECT_EQ(parse_value_list("0,1e-3,500"), (std::vector<double>{0, 1e-3, 500}));
  EXPECT_THROW(parse_seed_list("1,x"), ValidationError);
  EXPECT_THROW(parse_seed_list(""), ValidationError);
  EXPECT_THROW(parse_method_list("tent"), ValidationError);
  EXPECT_THROW(parse_value_list("1,,2"), ValidationError);
}
