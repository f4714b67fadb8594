#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedbicross/bilevel.hpp"
#include "fedbicross/dataset.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/personalization.hpp"
#include "fedbicross/synthesis.hpp"
#include "fedbicross/training.hpp"

namespace fedbicross {

inline constexpr const char* kVersion = "fedbicross 0.1.0";

enum class RunMode {
  FedBiCross,
  FedAvg1,
  IntraCluster,
  UniformCross,
  SimWeighted,
  NoPkd,
  NoClus,
};

inline const std::vector<std::pair<RunMode, std::string>>& mode_names() {
  static const std::vector<std::pair<RunMode, std::string>> names = {
      {RunMode::FedBiCross, "fedbicross"},   {RunMode::FedAvg1, "fedavg1"},
      {RunMode::IntraCluster, "intra_cluster"}, {RunMode::UniformCross, "uniform_cross"},
      {RunMode::SimWeighted, "sim_weighted"},   {RunMode::NoPkd, "no_pkd"},
      {RunMode::NoClus, "no_clus"},
  };
  return names;
}

inline std::string mode_to_string(RunMode m) {
  for (const auto& [mode, name] : mode_names())
    if (mode == m) return name;
  return "unknown";
}

inline bool mode_from_string(const std::string& s, RunMode& out) {
  for (const auto& [mode, name] : mode_names())
    if (name == s) {
      out = mode;
      return true;
    }
  return false;
}

// Architecture described at config level; realized via make_mlp / make_cnn.
struct ArchSpec {
  std::string kind = "mlp";                 // "mlp" | "cnn"
  std::vector<std::size_t> hidden = {32};   // mlp hidden widths
  std::size_t channels = 6;                 // cnn conv channels
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::size_t clients = 6;   // N
  double alpha = 0.3;        // Dirichlet concentration
  std::size_t clusters = 3;  // K
  ArchSpec arch;
  TrainConfig local{40, 1e-2, 32};
  SynthConfig synthesis;                // T = 100, B = 64 desk preset
  BilevelConfig bilevel;
  PersonalizationConfig personalization;
  std::size_t probes = 64;     // M
  double test_fraction = 0.2;  // per-client held-out fraction
  RunMode mode = RunMode::FedBiCross;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";
  std::size_t threads = 1;
  bool save_checkpoints = true;
  bool dump_snapshots = false;  // persist synthesis snapshots for inspection

  Architecture realized_arch() const {
    if (arch.kind == "cnn")
      return make_cnn({1, dataset.image_size, dataset.image_size}, arch.channels,
                      dataset.classes);
    return make_mlp(dataset.dim, arch.hidden, dataset.classes);
  }
};

namespace detail {

inline void check_known_keys(const nlohmann::json& obj,
                             const std::vector<std::string>& known,
                             const std::string& where,
                             std::vector<std::string>& violations) {
  if (!obj.is_object()) return;
  for (const auto& [key, value] : obj.items()) {
    bool found = false;
    for (const auto& k : known) found = found || k == key;
    if (!found) violations.push_back(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_field(const nlohmann::json& obj, const char* key, T& out,
                const std::string& where, std::vector<std::string>& violations) {
  if (!obj.is_object() || !obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    violations.push_back(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

// Parses JSON text, fills §defaults for omitted fields, and returns either a
// config or the complete list of violations. An empty document yields the
// desk-scale preset.
inline ExperimentConfig parse_config(const std::string& text,
                                     std::vector<std::string>& violations) {
  ExperimentConfig cfg;
  cfg.synthesis.alpha_tv = 0.0;  // re-defaulted below once the dataset kind is known

  nlohmann::json root;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    root = nlohmann::json::object();
  } else {
    root = nlohmann::json::parse(text, nullptr, false);
    if (root.is_discarded()) {
      violations.push_back("config: not valid JSON");
      return cfg;
    }
    if (!root.is_object()) {
      violations.push_back("config: top level must be a JSON object");
      return cfg;
    }
  }

  using detail::check_known_keys;
  using detail::read_field;
  check_known_keys(root,
                   {"dataset", "clients", "alpha", "clusters", "arch", "local",
                    "synthesis", "bilevel", "personalization", "probes",
                    "test_fraction", "mode", "seed", "out_dir", "threads",
                    "save_checkpoints", "dump_snapshots"},
                   "config", violations);

  if (root.contains("dataset")) {
    const auto& d = root["dataset"];
    check_known_keys(d,
                     {"kind", "classes", "samples", "dim", "image_size", "noise",
                      "separation"},
                     "dataset", violations);
    std::string kind = "blobs";
    read_field(d, "kind", kind, "dataset", violations);
    if (kind == "blobs") {
      cfg.dataset.kind = ToyKind::Blobs;
    } else if (kind == "striped_images") {
      cfg.dataset.kind = ToyKind::StripedImages;
    } else {
      violations.push_back("dataset.kind: must be 'blobs' or 'striped_images'");
    }
    read_field(d, "classes", cfg.dataset.classes, "dataset", violations);
    read_field(d, "samples", cfg.dataset.samples, "dataset", violations);
    read_field(d, "dim", cfg.dataset.dim, "dataset", violations);
    read_field(d, "image_size", cfg.dataset.image_size, "dataset", violations);
    read_field(d, "noise", cfg.dataset.noise, "dataset", violations);
    read_field(d, "separation", cfg.dataset.separation, "dataset", violations);
  }

  read_field(root, "clients", cfg.clients, "config", violations);
  read_field(root, "alpha", cfg.alpha, "config", violations);
  read_field(root, "clusters", cfg.clusters, "config", violations);

  if (root.contains("arch")) {
    const auto& a = root["arch"];
    check_known_keys(a, {"kind", "hidden", "channels"}, "arch", violations);
    read_field(a, "kind", cfg.arch.kind, "arch", violations);
    read_field(a, "hidden", cfg.arch.hidden, "arch", violations);
    read_field(a, "channels", cfg.arch.channels, "arch", violations);
  } else if (cfg.dataset.kind == ToyKind::StripedImages) {
    cfg.arch.kind = "cnn";
  }

  if (root.contains("local")) {
    const auto& l = root["local"];
    check_known_keys(l, {"epochs", "lr", "batch"}, "local", violations);
    read_field(l, "epochs", cfg.local.epochs, "local", violations);
    read_field(l, "lr", cfg.local.lr, "local", violations);
    read_field(l, "batch", cfg.local.batch_size, "local", violations);
  }

  // TV regularization defaults on only for image-shaped data
  cfg.synthesis.alpha_tv = cfg.dataset.kind == ToyKind::StripedImages ? 2.5e-5 : 0.0;
  if (root.contains("synthesis")) {
    const auto& s = root["synthesis"];
    check_known_keys(s,
                     {"iterations", "batch", "lr", "alpha_tv", "alpha_bn",
                      "bn_momentum", "optimizer", "stride"},
                     "synthesis", violations);
    read_field(s, "iterations", cfg.synthesis.iterations, "synthesis", violations);
    read_field(s, "batch", cfg.synthesis.batch, "synthesis", violations);
    read_field(s, "lr", cfg.synthesis.lr, "synthesis", violations);
    read_field(s, "alpha_tv", cfg.synthesis.alpha_tv, "synthesis", violations);
    read_field(s, "alpha_bn", cfg.synthesis.alpha_bn, "synthesis", violations);
    read_field(s, "bn_momentum", cfg.synthesis.bn_momentum, "synthesis", violations);
    std::string opt = "adam";
    read_field(s, "optimizer", opt, "synthesis", violations);
    if (opt == "adam") {
      cfg.synthesis.optimizer = SynthOptimizer::Adam;
    } else if (opt == "sgd") {
      cfg.synthesis.optimizer = SynthOptimizer::Sgd;
    } else {
      violations.push_back("synthesis.optimizer: must be 'adam' or 'sgd'");
    }
    read_field(s, "stride", cfg.synthesis.stride, "synthesis", violations);
  }

  if (root.contains("bilevel")) {
    const auto& b = root["bilevel"];
    check_known_keys(b,
                     {"inner_lr", "outer_lr", "temperature", "train_fraction",
                      "bn_keep"},
                     "bilevel", violations);
    read_field(b, "inner_lr", cfg.bilevel.inner_lr, "bilevel", violations);
    read_field(b, "outer_lr", cfg.bilevel.outer_lr, "bilevel", violations);
    read_field(b, "temperature", cfg.bilevel.temperature, "bilevel", violations);
    read_field(b, "train_fraction", cfg.bilevel.train_fraction, "bilevel", violations);
    read_field(b, "bn_keep", cfg.bilevel.bn_keep, "bilevel", violations);
  }

  if (root.contains("personalization")) {
    const auto& p = root["personalization"];
    check_known_keys(p, {"gamma", "delta", "epochs", "lr", "batch", "temperature"},
                     "personalization", violations);
    read_field(p, "gamma", cfg.personalization.gamma, "personalization", violations);
    read_field(p, "delta", cfg.personalization.delta, "personalization", violations);
    read_field(p, "epochs", cfg.personalization.epochs, "personalization", violations);
    read_field(p, "lr", cfg.personalization.lr, "personalization", violations);
    read_field(p, "batch", cfg.personalization.batch_size, "personalization",
               violations);
    read_field(p, "temperature", cfg.personalization.temperature, "personalization",
               violations);
  }

  read_field(root, "probes", cfg.probes, "config", violations);
  read_field(root, "test_fraction", cfg.test_fraction, "config", violations);
  if (root.contains("mode")) {
    std::string m;
    read_field(root, "mode", m, "config", violations);
    if (!mode_from_string(m, cfg.mode))
      violations.push_back("mode: unknown mode '" + m + "'");
  }
  read_field(root, "seed", cfg.seed, "config", violations);
  read_field(root, "out_dir", cfg.out_dir, "config", violations);
  read_field(root, "threads", cfg.threads, "config", violations);
  read_field(root, "save_checkpoints", cfg.save_checkpoints, "config", violations);
  read_field(root, "dump_snapshots", cfg.dump_snapshots, "config", violations);
  return cfg;
}

// Cross-field validation; returns every violation, not just the first.
inline std::vector<std::string> validate(const ExperimentConfig& cfg) {
  std::vector<std::string> v;
  if (cfg.dataset.classes < 2) v.push_back("dataset.classes: need at least 2 classes");
  if (cfg.dataset.samples < cfg.dataset.classes)
    v.push_back("dataset.samples: need at least one sample per class");
  if (cfg.clients < 2) v.push_back("clients: need at least 2 clients");
  if (cfg.dataset.samples < cfg.clients)
    v.push_back("dataset.samples: need at least one sample per client");
  if (!(cfg.alpha > 0.0)) v.push_back("alpha: Dirichlet concentration must be positive");
  if (cfg.clusters < 1) v.push_back("clusters: need at least 1 cluster");
  if (cfg.clusters > cfg.clients) v.push_back("clusters: K must satisfy K <= N");
  if (cfg.arch.kind != "mlp" && cfg.arch.kind != "cnn")
    v.push_back("arch.kind: must be 'mlp' or 'cnn'");
  if (cfg.arch.kind == "mlp" && cfg.dataset.kind == ToyKind::StripedImages)
    v.push_back("arch.kind: image dataset requires the cnn architecture");
  if (cfg.arch.kind == "cnn" && cfg.dataset.kind == ToyKind::Blobs)
    v.push_back("arch.kind: cnn architecture requires the image dataset");
  if (cfg.arch.kind == "mlp" && cfg.arch.hidden.empty())
    v.push_back("arch.hidden: mlp needs at least one hidden layer");
  if (cfg.local.epochs < 1) v.push_back("local.epochs: must be >= 1");
  if (!(cfg.local.lr > 0.0)) v.push_back("local.lr: must be positive");
  if (cfg.local.batch_size < 1) v.push_back("local.batch: must be >= 1");
  if (cfg.synthesis.iterations < 1) v.push_back("synthesis.iterations: must be >= 1");
  if (cfg.synthesis.batch < 2) v.push_back("synthesis.batch: must be >= 2");
  if (!(cfg.synthesis.lr > 0.0)) v.push_back("synthesis.lr: must be positive");
  if (cfg.synthesis.alpha_tv < 0.0) v.push_back("synthesis.alpha_tv: must be >= 0");
  if (cfg.synthesis.alpha_bn < 0.0) v.push_back("synthesis.alpha_bn: must be >= 0");
  if (cfg.synthesis.alpha_tv > 0.0 && cfg.dataset.kind != ToyKind::StripedImages)
    v.push_back("synthesis.alpha_tv: TV needs image-shaped data; set it to 0 for blobs");
  if (!(cfg.synthesis.bn_momentum > 0.0 && cfg.synthesis.bn_momentum < 1.0))
    v.push_back("synthesis.bn_momentum: must be in (0, 1)");
  if (cfg.synthesis.stride < 1) v.push_back("synthesis.stride: must be >= 1");
  if (!(cfg.bilevel.inner_lr > 0.0)) v.push_back("bilevel.inner_lr: must be positive");
  if (cfg.bilevel.outer_lr < 0.0) v.push_back("bilevel.outer_lr: must be >= 0");
  if (!(cfg.bilevel.temperature > 0.0))
    v.push_back("bilevel.temperature: must be positive");
  if (!(cfg.bilevel.train_fraction > 0.0 && cfg.bilevel.train_fraction < 1.0)) {
    v.push_back("bilevel.train_fraction: must be in (0, 1)");
  } else {
    double nv = (1.0 - cfg.bilevel.train_fraction) *
                static_cast<double>(cfg.synthesis.batch);
    if (nv < 1.0)
      v.push_back("bilevel.train_fraction: leaves an empty validation split");
  }
  if (!(cfg.bilevel.bn_keep >= 0.0 && cfg.bilevel.bn_keep < 1.0))
    v.push_back("bilevel.bn_keep: must be in [0, 1)");
  if (cfg.personalization.gamma < 0.0) v.push_back("personalization.gamma: must be >= 0");
  if (cfg.personalization.delta < 0.0) v.push_back("personalization.delta: must be >= 0");
  if (cfg.personalization.epochs < 1) v.push_back("personalization.epochs: must be >= 1");
  if (!(cfg.personalization.lr >= 0.0)) v.push_back("personalization.lr: must be >= 0");
  if (cfg.personalization.batch_size < 1)
    v.push_back("personalization.batch: must be >= 1");
  if (!(cfg.personalization.temperature > 0.0))
    v.push_back("personalization.temperature: must be positive");
  if (cfg.probes < 1) v.push_back("probes: must be >= 1");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0))
    v.push_back("test_fraction: must be in (0, 1)");
  if (cfg.threads < 1) v.push_back("threads: must be >= 1");
  if (cfg.out_dir.empty()) v.push_back("out_dir: must not be empty");
  return v;
}

// Parse + validate; throws ConfigError carrying every violation found.
inline ExperimentConfig validate_config(const std::string& text) {
  std::vector<std::string> violations;
  ExperimentConfig cfg = parse_config(text, violations);
  if (violations.empty()) {
    auto more = validate(cfg);
    violations.insert(violations.end(), more.begin(), more.end());
  }
  if (!violations.empty()) throw ConfigError(std::move(violations));
  return cfg;
}

// Round-trip of the effective configuration into the report.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["dataset"] = {
      {"kind", cfg.dataset.kind == ToyKind::Blobs ? "blobs" : "striped_images"},
      {"classes", cfg.dataset.classes},
      {"samples", cfg.dataset.samples},
      {"dim", cfg.dataset.dim},
      {"image_size", cfg.dataset.image_size},
      {"noise", cfg.dataset.noise},
      {"separation", cfg.dataset.separation}};
  j["clients"] = cfg.clients;
  j["alpha"] = cfg.alpha;
  j["clusters"] = cfg.clusters;
  j["arch"] = {{"kind", cfg.arch.kind},
               {"hidden", cfg.arch.hidden},
               {"channels", cfg.arch.channels}};
  j["local"] = {{"epochs", cfg.local.epochs},
                {"lr", cfg.local.lr},
                {"batch", cfg.local.batch_size}};
  j["synthesis"] = {
      {"iterations", cfg.synthesis.iterations},
      {"batch", cfg.synthesis.batch},
      {"lr", cfg.synthesis.lr},
      {"alpha_tv", cfg.synthesis.alpha_tv},
      {"alpha_bn", cfg.synthesis.alpha_bn},
      {"bn_momentum", cfg.synthesis.bn_momentum},
      {"optimizer", cfg.synthesis.optimizer == SynthOptimizer::Adam ? "adam" : "sgd"},
      {"stride", cfg.synthesis.stride}};
  j["bilevel"] = {{"inner_lr", cfg.bilevel.inner_lr},
                  {"outer_lr", cfg.bilevel.outer_lr},
                  {"temperature", cfg.bilevel.temperature},
                  {"train_fraction", cfg.bilevel.train_fraction},
                  {"bn_keep", cfg.bilevel.bn_keep}};
  j["personalization"] = {{"gamma", cfg.personalization.gamma},
                          {"delta", cfg.personalization.delta},
                          {"epochs", cfg.personalization.epochs},
                          {"lr", cfg.personalization.lr},
                          {"batch", cfg.personalization.batch_size},
                          {"temperature", cfg.personalization.temperature}};
  j["probes"] = cfg.probes;
  j["test_fraction"] = cfg.test_fraction;
  j["mode"] = mode_to_string(cfg.mode);
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  j["save_checkpoints"] = cfg.save_checkpoints;
  j["dump_snapshots"] = cfg.dump_snapshots;
  return j;
}

}  // namespace fedbicross
