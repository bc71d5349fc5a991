// psmt: run continual test-time adaptation experiments on synthetic feature streams.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "psmt/error.hpp"
#include "psmt/harness/config.hpp"
#include "psmt/harness/experiment.hpp"
#include "psmt/harness/report.hpp"

namespace {

namespace fs = std::filesystem;
using namespace psmt::harness;

struct CommonOptions {
  std::string config;
  std::string out;
  std::string seeds;
  std::string methods;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config file (defaults used when omitted)");
  cmd->add_option("--out", o.out, "Output directory (default: $PSMT_OUT_DIR or config output_dir)");
  cmd->add_option("--seeds", o.seeds, "Comma-separated seed list, e.g. 0,1,2");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? default_config() : load_config(o.config);
  if (!o.out.empty()) {
    cfg.output_dir = o.out;
  } else if (const char* env = std::getenv(kOutDirEnv); env && *env) {
    cfg.output_dir = env;
  }
  if (!o.seeds.empty()) cfg.seeds = parse_seed_list(o.seeds);
  if (!o.methods.empty()) cfg.methods = parse_method_list(o.methods);
  cfg.validate();
  return cfg;
}

int report_partial(const RunResult& r) {
  if (!r.partial()) return 0;
  for (const auto& f : r.failures) std::cerr << "numeric failure: " << f << "\n";
  return 2;
}

int cmd_run(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const RunResult result = run_experiment(cfg);
  write_run(cfg, result, cfg.output_dir);
  for (const auto m : cfg.methods)
    std::cout << to_string(m) << " mean error " << format_double(mean_error(result.records, to_string(m)))
              << "\n";
  std::cout << "wrote " << cfg.output_dir << "\n";
  return report_partial(result);
}

int cmd_ablate(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  int status = 0;
  for (const auto& row : run_ablation(cfg, cfg.output_dir)) {
    std::cout << "SD " << (row.sd ? "on " : "off") << " SEMA " << (row.sema ? "on " : "off")
              << " mean error " << format_double(row.mean_error) << "\n";
    status = std::max(status, report_partial(row.result));
  }
  return status;
}

int cmd_sweep(const CommonOptions& o, const std::string& param, const std::string& values) {
  const RunConfig cfg = resolve(o);
  const SweepParam p = parse_sweep_param(param);
  int status = 0;
  for (const auto& row : run_sweep(cfg, p, parse_value_list(values), cfg.output_dir)) {
    std::cout << param << " = " << format_double(row.value) << " mean error "
              << format_double(row.mean_error) << "\n";
    status = std::max(status, report_partial(row.result));
  }
  return status;
}

int cmd_fisher_report(const std::string& run_dir, const std::string& out) {
  const auto rows = export_fisher_report(load_snapshots(run_dir), out.empty() ? run_dir : out);
  for (const auto& r : rows)
    std::cout << r.method << " seed " << r.seed << " seg " << r.from_segment << "->" << r.to_segment
              << " top1 " << format_double(r.top1) << " top5 " << format_double(r.top5) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-selective mean teacher for continual test-time adaptation"};
  app.require_subcommand(1);

  CommonOptions run_opts, ablate_opts, sweep_opts;
  auto* run = app.add_subcommand("run", "Run every configured method over the stream");
  add_common(run, run_opts);
  run->add_option("--methods", run_opts.methods, "Comma-separated subset of source,bn_adapt,plain_mt,psmt");

  auto* ablate = app.add_subcommand("ablate", "Run the SD x SEMA toggle grid");
  add_common(ablate, ablate_opts);

  std::string sweep_param, sweep_values;
  auto* sweep = app.add_subcommand("sweep", "Sweep one adapter hyperparameter");
  add_common(sweep, sweep_opts);
  sweep->add_option("--param", sweep_param, "lambda, xi or delta")->required();
  sweep->add_option("--values", sweep_values, "Comma-separated values")->required();

  std::string fisher_dir, fisher_out;
  auto* fisher = app.add_subcommand("fisher-report", "Top-k Fisher retention across segment boundaries");
  fisher->add_option("--run", fisher_dir, "Run directory containing fisher/")->required();
  fisher->add_option("--out", fisher_out, "Report directory (default: the run directory)");

  std::string plot_metrics, plot_out;
  auto* plot = app.add_subcommand("plot", "Write gnuplot-ready data from metrics.csv");
  plot->add_option("--metrics", plot_metrics, "metrics.csv path")->required();
  plot->add_option("--out", plot_out, "Output directory (default: alongside metrics.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*ablate) return cmd_ablate(ablate_opts);
    if (*sweep) return cmd_sweep(sweep_opts, sweep_param, sweep_values);
    if (*fisher) return cmd_fisher_report(fisher_dir, fisher_out);
    if (*plot) {
      const std::string dir =
          plot_out.empty() ? fs::path(plot_metrics).parent_path().string() : plot_out;
      write_plot_files(plot_metrics, dir.empty() ? "." : dir);
      std::cout << "wrote " << (dir.empty() ? "." : dir) << "/error.gp\n";
      return 0;
    }
  } catch (const psmt::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const psmt::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
