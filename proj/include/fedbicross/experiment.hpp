#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedbicross/bilevel.hpp"
#include "fedbicross/checkpoint.hpp"
#include "fedbicross/clustering.hpp"
#include "fedbicross/config.hpp"
#include "fedbicross/dataset.hpp"
#include "fedbicross/parallel.hpp"
#include "fedbicross/partition.hpp"
#include "fedbicross/personalization.hpp"
#include "fedbicross/report.hpp"
#include "fedbicross/synthesis.hpp"
#include "fedbicross/training.hpp"

namespace fedbicross {

// In-memory stage outputs, exposed for tests and tooling.
struct ExperimentArtifacts {
  std::vector<Dataset> train_shards;
  std::vector<Dataset> test_shards;
  std::vector<ClientModel> clients;
  Clustering clustering;
  std::vector<std::size_t> assignment;
  std::vector<Trajectory> trajectories;
  std::vector<ClusterTrainState> cluster_states;
  std::vector<PersonalizedModel> personalized;
};

namespace detail {

class StageTimer {
 public:
  explicit StageTimer(std::map<std::string, double>& sink) : sink_(sink) {}
  template <class F>
  auto time(const std::string& name, F&& f) {
    auto start = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record(name, start);
    } else {
      auto out = f();
      record(name, start);
      return out;
    }
  }

 private:
  void record(const std::string& name,
              std::chrono::steady_clock::time_point start) {
    sink_[name] = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - start)
                      .count();
  }
  std::map<std::string, double>& sink_;
};

// Per-client train/test split of a shard. A one-sample shard degenerates to
// the same sample on both sides rather than an empty split.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_shard(
    const std::vector<std::size_t>& shard, double test_fraction, std::uint64_t seed,
    std::size_t client_id) {
  if (shard.size() == 1) return {shard, shard};
  RandomStream rng = RandomStream::substream(seed, "client-split", client_id);
  auto [train_local, test_local] = split_indices(shard.size(), test_fraction, rng);
  if (test_local.empty()) {
    test_local.push_back(train_local.back());
    train_local.pop_back();
  }
  std::vector<std::size_t> train, test;
  for (auto i : train_local) train.push_back(shard[i]);
  for (auto i : test_local) test.push_back(shard[i]);
  return {train, test};
}

// Mean soft-label prediction of a set of clients on the shared probes, then
// its mean row entropy.
inline double mean_prediction_entropy(const std::vector<PredictionMatrix>& mats,
                                      const std::vector<std::size_t>& members) {
  Tensor mean(mats.front().probs.shape);
  for (std::size_t m : members)
    for (std::size_t i = 0; i < mean.numel(); ++i)
      mean.data[i] += mats[m].probs.data[i] / static_cast<double>(members.size());
  return mean_row_entropy(mean);
}

inline WeightMode weight_mode_for(RunMode mode) {
  switch (mode) {
    case RunMode::UniformCross: return WeightMode::FrozenUniform;
    case RunMode::SimWeighted: return WeightMode::FrozenSimilarity;
    case RunMode::IntraCluster: return WeightMode::FrozenSelf;
    default: return WeightMode::Learned;
  }
}

}  // namespace detail

// Algorithm end to end: local training, clustering + synthesis, bi-level
// cross-cluster optimization, personalized distillation, evaluation,
// persistence. Deterministic under (config, seed); timings are the only
// non-reproducible fields. A synthesis divergence yields a partial report
// with the error recorded instead of a throw.
inline RunReport run_experiment(const ExperimentConfig& cfg,
                                ExperimentArtifacts* artifacts = nullptr) {
  {
    auto violations = validate(cfg);
    if (!violations.empty()) throw ConfigError(std::move(violations));
  }

  RunReport rep;
  rep.config_echo = config_to_json(cfg);
  rep.mode = mode_to_string(cfg.mode);
  rep.seed = cfg.seed;
  rep.version = kVersion;
  detail::StageTimer timer(rep.timings_ms);

  ExperimentArtifacts local_artifacts;
  ExperimentArtifacts& art = artifacts != nullptr ? *artifacts : local_artifacts;

  const Architecture arch = cfg.realized_arch();
  const std::filesystem::path out_dir(cfg.out_dir);

  // --- data and local training ---
  Dataset data = timer.time("dataset", [&] { return make_toy_dataset(cfg.dataset, cfg.seed); });
  Partition part = timer.time("partition", [&] {
    return dirichlet_partition(data, cfg.clients, cfg.alpha, cfg.seed);
  });

  art.train_shards.resize(cfg.clients);
  art.test_shards.resize(cfg.clients);
  for (std::size_t i = 0; i < cfg.clients; ++i) {
    auto [train_idx, test_idx] =
        detail::split_shard(part.client_indices[i], cfg.test_fraction, cfg.seed, i);
    art.train_shards[i] = subset(data, train_idx);
    art.test_shards[i] = subset(data, test_idx);
  }

  timer.time("local_training", [&] {
    std::vector<std::optional<ClientModel>> slots(cfg.clients);
    parallel_for(cfg.clients, cfg.threads, [&](std::size_t i) {
      slots[i] = train_local(i, art.train_shards[i], arch, cfg.local, cfg.seed);
    });
    for (auto& s : slots) art.clients.push_back(std::move(*s));
  });

  auto finalize = [&](const std::vector<const Model*>& eval_models) {
    EvaluationReport ev = timer.time("evaluation", [&] {
      return evaluate_per_client(eval_models, art.test_shards);
    });
    rep.per_client_accuracy = ev.per_client;
    rep.macro_mean = ev.macro_mean;
  };

  auto persist = [&] {
    if (cfg.save_checkpoints) {
      timer.time("checkpoints", [&] {
        for (const auto& c : art.clients)
          save_model(c.model,
                     out_dir / "checkpoints" / ("client_" + std::to_string(c.id) + ".json"));
        for (const auto& st : art.cluster_states)
          save_model(st.model, out_dir / "checkpoints" /
                                   ("cluster_" + std::to_string(st.cluster_id) + ".json"));
        for (const auto& p : art.personalized)
          save_model(p.model,
                     out_dir / "checkpoints" /
                         ("personalized_" + std::to_string(p.client_id) + ".json"));
      });
    }
    emit_report(rep, out_dir);
  };

  if (cfg.mode == RunMode::FedAvg1) {
    std::vector<std::size_t> sizes;
    for (const auto& s : art.train_shards) sizes.push_back(s.size());
    Model averaged = timer.time("fedavg", [&] {
      return fedavg_one_shot(art.clients, sizes);
    });
    std::vector<const Model*> eval_models(cfg.clients, &averaged);
    finalize(eval_models);
    art.cluster_states.push_back({0, averaged, {1.0}, {}, {}, {}});
    persist();
    return rep;
  }

  // --- stage 1a: clustering ---
  auto mats = timer.time("probes", [&] {
    return probe_predictions(art.clients, cfg.probes, arch.input_shape, cfg.seed);
  });
  std::size_t effective_k = cfg.clusters;
  if (cfg.mode == RunMode::NoClus) {
    effective_k = 1;
    art.assignment.assign(cfg.clients, 0);
  } else {
    art.clustering = timer.time("kmeans", [&] {
      return kmeans_cluster(mats, cfg.clusters, cfg.seed);
    });
    art.assignment = art.clustering.assignment;
    rep.has_clustering = true;
    rep.assignment = art.clustering.assignment;
    rep.inertia = art.clustering.inertia;
  }

  std::vector<std::vector<std::size_t>> cluster_members(effective_k);
  for (std::size_t i = 0; i < cfg.clients; ++i)
    cluster_members[art.assignment[i]].push_back(i);

  rep.has_entropy = true;
  {
    std::vector<std::size_t> everyone(cfg.clients);
    for (std::size_t i = 0; i < cfg.clients; ++i) everyone[i] = i;
    rep.global_entropy = detail::mean_prediction_entropy(mats, everyone);
    for (const auto& members : cluster_members)
      rep.cluster_entropy.push_back(detail::mean_prediction_entropy(mats, members));
  }

  std::vector<EnsembleTeacher> teachers;
  for (std::size_t k = 0; k < effective_k; ++k) {
    std::vector<std::shared_ptr<const Model>> members;
    for (std::size_t i : cluster_members[k])
      members.push_back(std::make_shared<const Model>(art.clients[i].model));
    teachers.push_back(build_ensemble(std::move(members), k));
  }

  // --- stage 1b: synthesis + noise adaptation; stages 2-3 below may abort
  // on divergence, in which case the report carries the error record ---
  try {
    std::vector<NoiseAdaptedTeacher> adapted(effective_k);
    timer.time("synthesis", [&] {
      art.trajectories.resize(effective_k);
      parallel_for(effective_k, cfg.threads, [&](std::size_t k) {
        art.trajectories[k] = synthesize_trajectory(teachers[k], cfg.synthesis, cfg.seed);
        adapted[k] =
            adapt_teacher_bn(teachers[k], art.trajectories[k], cfg.synthesis.bn_momentum);
      });
    });

    if (cfg.dump_snapshots) {
      timer.time("snapshot_dump", [&] {
        for (const auto& traj : art.trajectories) {
          nlohmann::json j;
          j["format"] = "fedbicross-snapshots-v1";
          j["cluster"] = traj.cluster_id;
          j["labels"] = traj.labels;
          nlohmann::json snaps = nlohmann::json::array();
          for (std::size_t s = 0; s < traj.snapshots.size(); ++s)
            snaps.push_back({{"iteration", traj.snapshot_iters[s]},
                             {"shape", traj.snapshots[s].shape},
                             {"data", traj.snapshots[s].data}});
          j["snapshots"] = snaps;
          write_file_atomic(out_dir / "checkpoints" /
                                ("snapshots_cluster_" +
                                 std::to_string(traj.cluster_id) + ".json"),
                            j.dump() + "\n");
        }
      });
    }

    // --- stage 2: online bi-level cross-cluster optimization ---
    timer.time("bilevel", [&] {
      std::vector<std::optional<ClusterTrainState>> slots(effective_k);
      parallel_for(effective_k, cfg.threads, [&](std::size_t k) {
        slots[k] = run_single_cluster(k, art.trajectories, teachers, adapted, arch,
                                      cfg.bilevel, detail::weight_mode_for(cfg.mode),
                                      art.clustering.centroids, cfg.seed);
      });
      for (auto& s : slots) art.cluster_states.push_back(std::move(*s));
    });

    for (const auto& st : art.cluster_states) {
      rep.weight_history.push_back(st.weight_history);
      rep.val_loss_history.push_back(st.val_loss_history);
    }
    rep.weight_iters = art.trajectories.front().snapshot_iters;

    // --- stage 3: personalized distillation ---
    if (cfg.mode == RunMode::NoPkd) {
      std::vector<const Model*> eval_models;
      for (std::size_t i = 0; i < cfg.clients; ++i)
        eval_models.push_back(&art.cluster_states[art.assignment[i]].model);
      finalize(eval_models);
    } else {
      timer.time("personalization", [&] {
        std::vector<std::optional<PersonalizedModel>> slots(cfg.clients);
        parallel_for(cfg.clients, cfg.threads, [&](std::size_t i) {
          slots[i] = personalize(art.clients[i], art.train_shards[i],
                                 art.cluster_states[art.assignment[i]].model,
                                 cfg.personalization, cfg.seed);
          slots[i]->source_cluster = art.assignment[i];
        });
        for (auto& s : slots) art.personalized.push_back(std::move(*s));
      });
      std::vector<const Model*> eval_models;
      for (const auto& p : art.personalized) eval_models.push_back(&p.model);
      finalize(eval_models);
    }
  } catch (const DivergenceError& e) {
    rep.error = e.what();
  }

  persist();
  return rep;
}

}  // namespace fedbicross
