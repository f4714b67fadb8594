// Command-line front end: run one experiment, sweep a grid, or inspect a
// stored report.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedbicross/experiment.hpp"

namespace {

using namespace fedbicross;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

ExperimentConfig load_config(const Overrides& ov) {
  std::string text;
  if (!ov.config_path.empty()) text = read_file(ov.config_path);
  ExperimentConfig cfg = validate_config(text);

  // environment overrides (seed and output dir only), below flags
  if (const char* env = std::getenv("FEDBICROSS_SEED"); env && !ov.seed)
    cfg.seed = std::strtoull(env, nullptr, 10);
  if (const char* env = std::getenv("FEDBICROSS_OUT"); env && !ov.out)
    cfg.out_dir = env;

  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.mode) {
    if (!mode_from_string(*ov.mode, cfg.mode))
      throw ConfigError({"mode: unknown mode '" + *ov.mode + "'"});
  }
  if (ov.out) cfg.out_dir = *ov.out;
  if (ov.threads) cfg.threads = *ov.threads;

  auto violations = validate(cfg);
  if (!violations.empty()) throw ConfigError(std::move(violations));
  return cfg;
}

void print_report_summary(const RunReport& rep) {
  std::printf("mode: %s   seed: %llu   version: %s\n", rep.mode.c_str(),
              static_cast<unsigned long long>(rep.seed), rep.version.c_str());
  if (!rep.error.empty()) {
    std::printf("PARTIAL RUN: %s\n", rep.error.c_str());
    return;
  }
  std::printf("macro-mean accuracy: %.4f\n", rep.macro_mean);
  for (std::size_t i = 0; i < rep.per_client_accuracy.size(); ++i) {
    std::size_t cluster =
        rep.has_clustering && i < rep.assignment.size() ? rep.assignment[i] : 0;
    std::printf("  client %zu (cluster %zu): %.4f\n", i, cluster,
                rep.per_client_accuracy[i]);
  }
  if (rep.has_clustering)
    std::printf("clustering inertia: %.6g\n", rep.inertia);
  if (rep.has_entropy) {
    std::printf("ensemble entropy: global %.4f, per cluster:", rep.global_entropy);
    for (double e : rep.cluster_entropy) std::printf(" %.4f", e);
    std::printf("\n");
  }
  for (std::size_t k = 0; k < rep.weight_history.size(); ++k) {
    if (rep.weight_history[k].empty()) continue;
    std::printf("final weights, cluster %zu:", k);
    for (double w : rep.weight_history[k].back()) std::printf(" %.4f", w);
    std::printf("\n");
  }
}

int cmd_run(const Overrides& ov) {
  ExperimentConfig cfg = load_config(ov);
  RunReport rep = run_experiment(cfg);
  print_report_summary(rep);
  std::printf("artifacts: %s\n",
              (std::filesystem::path(cfg.out_dir) / "report.json").string().c_str());
  return rep.error.empty() ? 0 : 4;
}

int cmd_sweep(const Overrides& ov, const std::vector<double>& alphas,
              const std::vector<std::size_t>& cluster_counts,
              const std::vector<std::string>& modes, std::size_t num_seeds) {
  ExperimentConfig base = load_config(ov);
  std::filesystem::path root(base.out_dir);

  std::string csv = "mode,clusters,alpha,seed,macro_accuracy\n";
  // mean accuracy per (mode, K) x alpha, printed Tables-style at the end
  std::vector<std::vector<double>> table;
  std::vector<std::string> row_names;

  for (const auto& mode_name : modes) {
    RunMode mode;
    if (!mode_from_string(mode_name, mode))
      throw ConfigError({"sweep: unknown mode '" + mode_name + "'"});
    for (std::size_t k : cluster_counts) {
      row_names.push_back(mode_name + " (K=" + std::to_string(k) + ")");
      table.emplace_back();
      for (double alpha : alphas) {
        double total = 0.0;
        for (std::size_t s = 0; s < num_seeds; ++s) {
          ExperimentConfig cfg = base;
          cfg.mode = mode;
          cfg.clusters = k;
          cfg.alpha = alpha;
          cfg.seed = base.seed + s;
          char leaf[160];
          std::snprintf(leaf, sizeof leaf, "%s_k%zu_a%g_s%llu", mode_name.c_str(), k,
                        alpha, static_cast<unsigned long long>(cfg.seed));
          cfg.out_dir = (root / leaf).string();
          RunReport rep = run_experiment(cfg);
          if (!rep.error.empty())
            throw IoError("sweep run failed (" + std::string(leaf) + "): " + rep.error);
          total += rep.macro_mean;
          char line[200];
          std::snprintf(line, sizeof line, "%s,%zu,%.17g,%llu,%.17g\n",
                        mode_name.c_str(), k, alpha,
                        static_cast<unsigned long long>(cfg.seed), rep.macro_mean);
          csv += line;
          std::printf("done: %s -> %.4f\n", leaf, rep.macro_mean);
        }
        table.back().push_back(total / static_cast<double>(num_seeds));
      }
    }
  }
  write_file_atomic(root / "sweep.csv", csv);

  std::printf("\nmean accuracy over %zu seed(s):\n%-28s", num_seeds, "method");
  for (double a : alphas) std::printf("  a=%-6g", a);
  std::printf("\n");
  for (std::size_t r = 0; r < table.size(); ++r) {
    std::printf("%-28s", row_names[r].c_str());
    for (double v : table[r]) std::printf("  %.4f ", v);
    std::printf("\n");
  }
  std::printf("combined table: %s\n", (root / "sweep.csv").string().c_str());
  return 0;
}

int cmd_inspect(const std::string& report_path) {
  RunReport rep = load_report(report_path);
  print_report_summary(rep);
  std::printf("timings (ms):\n");
  for (const auto& [name, ms] : rep.timings_ms)
    std::printf("  %-18s %10.1f\n", name.c_str(), ms);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot federated learning testbed: clustered data-free "
               "distillation with learned cross-cluster weights"};
  app.require_subcommand(1);

  Overrides ov;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", ov.config_path, "JSON config file (omit for defaults)");
    cmd->add_option("--seed", ov.seed, "experiment seed");
    cmd->add_option("--out", ov.out, "output directory");
    cmd->add_option("--threads", ov.threads, "worker threads for independent tasks");
  };

  CLI::App* run = app.add_subcommand("run", "run one experiment");
  add_common(run);
  run->add_option("--mode", ov.mode,
                  "fedbicross | fedavg1 | intra_cluster | uniform_cross | "
                  "sim_weighted | no_pkd | no_clus");

  CLI::App* sweep = app.add_subcommand("sweep", "grid over alpha x K x mode x seeds");
  add_common(sweep);
  std::vector<double> alphas = {0.1, 0.3, 0.5};
  std::vector<std::size_t> cluster_counts = {3};
  std::vector<std::string> modes = {"fedbicross", "fedavg1"};
  std::size_t num_seeds = 3;
  sweep->add_option("--alphas", alphas, "Dirichlet concentrations");
  sweep->add_option("--clusters-list", cluster_counts, "cluster counts K");
  sweep->add_option("--modes", modes, "modes to run");
  sweep->add_option("--seeds", num_seeds, "seeds per cell (base taken from config)");

  CLI::App* inspect = app.add_subcommand("inspect", "pretty-print a stored report");
  std::string report_path;
  inspect->add_option("--report", report_path, "path to report.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(ov);
    if (sweep->parsed()) return cmd_sweep(ov, alphas, cluster_counts, modes, num_seeds);
    if (inspect->parsed()) return cmd_inspect(report_path);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
