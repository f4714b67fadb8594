#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedbicross/checkpoint.hpp"
#include "fedbicross/errors.hpp"

namespace fedbicross {

// Everything one experiment produces, serialized as report.json plus the
// accuracy and weight-trajectory CSV tables. The config echo is sufficient to
// re-run the experiment bit-identically; timings are informational only and
// excluded from determinism comparisons.
struct RunReport {
  nlohmann::json config_echo;
  std::string mode;
  std::uint64_t seed = 0;
  std::string version;

  bool has_clustering = false;
  std::vector<std::size_t> assignment;  // client -> cluster
  double inertia = 0.0;

  std::vector<double> per_client_accuracy;
  double macro_mean = 0.0;

  // weight_history[cluster][step] is a K-vector; weight_iters gives the
  // 1-based synthesis iteration of each step
  std::vector<std::vector<std::vector<double>>> weight_history;
  std::vector<std::size_t> weight_iters;
  std::vector<std::vector<double>> val_loss_history;  // per cluster, per step

  bool has_entropy = false;
  double global_entropy = 0.0;
  std::vector<double> cluster_entropy;

  std::string error;  // non-empty for a partial report
  std::map<std::string, double> timings_ms;

  bool operator==(const RunReport&) const = default;
};

inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["version"] = r.version;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["config"] = r.config_echo;
  if (r.has_clustering) {
    j["clustering"] = {{"assignment", r.assignment}, {"inertia", r.inertia}};
  } else {
    j["clustering"] = nullptr;
  }
  j["accuracy"] = {{"per_client", r.per_client_accuracy},
                   {"macro_mean", r.macro_mean}};
  j["weights"] = {{"iterations", r.weight_iters}, {"history", r.weight_history}};
  j["val_loss"] = r.val_loss_history;
  if (r.has_entropy) {
    j["entropy"] = {{"global_ensemble", r.global_entropy},
                    {"per_cluster", r.cluster_entropy}};
  } else {
    j["entropy"] = nullptr;
  }
  j["error"] = r.error;
  j["timings_ms"] = r.timings_ms;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.version = j.at("version").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_echo = j.at("config");
  if (!j.at("clustering").is_null()) {
    r.has_clustering = true;
    r.assignment = j["clustering"].at("assignment").get<std::vector<std::size_t>>();
    r.inertia = j["clustering"].at("inertia").get<double>();
  }
  r.per_client_accuracy = j.at("accuracy").at("per_client").get<std::vector<double>>();
  r.macro_mean = j.at("accuracy").at("macro_mean").get<double>();
  r.weight_iters = j.at("weights").at("iterations").get<std::vector<std::size_t>>();
  r.weight_history =
      j.at("weights").at("history").get<std::vector<std::vector<std::vector<double>>>>();
  r.val_loss_history = j.at("val_loss").get<std::vector<std::vector<double>>>();
  if (!j.at("entropy").is_null()) {
    r.has_entropy = true;
    r.global_entropy = j["entropy"].at("global_ensemble").get<double>();
    r.cluster_entropy = j["entropy"].at("per_cluster").get<std::vector<double>>();
  }
  r.error = j.at("error").get<std::string>();
  r.timings_ms = j.at("timings_ms").get<std::map<std::string, double>>();
  return r;
}

inline RunReport load_report(const std::filesystem::path& path) {
  return report_from_json(nlohmann::json::parse(read_file(path)));
}

namespace detail {

inline std::string full_precision(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// report.json + accuracy.csv + weights.csv, each written atomically.
inline void emit_report(const RunReport& r, const std::filesystem::path& dir) {
  write_file_atomic(dir / "report.json", report_to_json(r).dump(2) + "\n");

  std::string acc = "client,cluster,accuracy\n";
  for (std::size_t i = 0; i < r.per_client_accuracy.size(); ++i) {
    std::size_t cluster = r.has_clustering && i < r.assignment.size()
                              ? r.assignment[i]
                              : 0;
    acc += std::to_string(i) + "," + std::to_string(cluster) + "," +
           detail::full_precision(r.per_client_accuracy[i]) + "\n";
  }
  write_file_atomic(dir / "accuracy.csv", acc);

  std::size_t k = r.weight_history.size();
  std::string w = "iteration,cluster";
  for (std::size_t j = 0; j < k; ++j) w += ",w_" + std::to_string(j);
  w += "\n";
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t s = 0; s < r.weight_history[c].size(); ++s) {
      w += std::to_string(r.weight_iters[s]) + "," + std::to_string(c);
      for (double v : r.weight_history[c][s]) w += "," + detail::full_precision(v);
      w += "\n";
    }
  write_file_atomic(dir / "weights.csv", w);
}

}  // namespace fedbicross
