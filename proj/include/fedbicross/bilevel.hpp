#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fedbicross/clustering.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/losses.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/synthesis.hpp"
#include "fedbicross/tensor.hpp"

namespace fedbicross {

// Cross-cluster weight vectors live on the probability simplex.
inline void validate_weight_vector(const std::vector<double>& w, double tol = 1e-9) {
  double sum = 0.0;
  for (double v : w) {
    if (!(v >= 0.0)) throw InputError("weight vector has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > tol) throw InputError("weight vector does not sum to 1");
}

// Blend factor between the noise-adapted and original teacher: 1 - t/T.
inline double lambda_schedule(std::size_t t, std::size_t total) {
  if (t < 1 || t > total) throw InputError("lambda_schedule: t must be in [1, T]");
  return 1.0 - static_cast<double>(t) / static_cast<double>(total);
}

// Euclidean projection onto the probability simplex (sort-and-threshold).
inline std::vector<double> project_simplex(const std::vector<double>& v) {
  if (v.empty()) throw InputError("project_simplex: empty vector");
  for (double x : v)
    if (!std::isfinite(x)) throw InputError("project_simplex: non-finite entry");

  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cum += u[j];
    double cand = (cum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - cand > 0.0) theta = cand;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

// Fixed train/validation partition of batch positions 1..B.
struct SplitIndex {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
};

inline SplitIndex make_split(std::size_t batch, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw InputError("make_split: train fraction must be in (0, 1)");
  std::size_t n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(batch)));
  n_train = std::min(std::max<std::size_t>(n_train, 1), batch - 1);
  SplitIndex s;
  for (std::size_t i = 0; i < n_train; ++i) s.train_idx.push_back(i);
  for (std::size_t i = n_train; i < batch; ++i) s.val_idx.push_back(i);
  return s;
}

struct BilevelConfig {
  double inner_lr = 5e-2;      // learning rate for the cluster model
  double outer_lr = 1.0;       // learning rate for the cross-cluster weights
  double temperature = 20.0;   // tau for both KL terms
  double train_fraction = 0.8;
  double bn_keep = 0.9;        // running-stat retention for the student
};

namespace detail {

struct KdEval {
  double value = 0.0;
  std::vector<double> grad_params;
  std::vector<LayerBatchStats> batch_stats;
};

// Blended distillation loss on one batch with gradients into the student
// only. Teachers are queried in inference BN mode; the student runs in
// BatchStats mode so its own running statistics never influence training.
inline KdEval kd_eval(const Model& student, const EnsembleTeacher& original,
                      const EnsembleTeacher& adapted, const Tensor& x, std::size_t t,
                      std::size_t total, double tau) {
  double lambda = lambda_schedule(t, total);
  Tensor adapted_logits = adapted.soft_logits(x);
  Tensor original_logits = original.soft_logits(x);

  auto tr = student.forward_traced(x, BnMode::BatchStats);
  LossValue kl_adapted = kl_divergence(adapted_logits, tr.logits(), tau);
  LossValue kl_original = kl_divergence(original_logits, tr.logits(), tau);

  Tensor dlogits(tr.logits().shape);
  for (std::size_t i = 0; i < dlogits.numel(); ++i)
    dlogits.data[i] = lambda * kl_adapted.grad_input->data[i] +
                      (1.0 - lambda) * kl_original.grad_input->data[i];
  Gradients g = tr.backward(dlogits, nullptr, false);

  KdEval out;
  out.value = lambda * kl_adapted.value + (1.0 - lambda) * kl_original.value;
  out.grad_params = std::move(g.params);
  out.batch_stats = tr.batch_stats();
  return out;
}

}  // namespace detail

// Blended knowledge-distillation loss (public contract): value plus the
// gradient with respect to the student's parameters.
inline LossValue kd_loss(const Model& student, const EnsembleTeacher& original,
                         const EnsembleTeacher& adapted, const Tensor& x, std::size_t t,
                         std::size_t total, double tau) {
  if (original.members.empty() || adapted.members.empty())
    throw InputError("kd_loss: empty teacher");
  if (original.members.front()->num_classes() != student.num_classes() ||
      adapted.members.front()->num_classes() != student.num_classes())
    throw InputError("kd_loss: output dimension mismatch");
  if (x.batch() == 0) throw InputError("kd_loss: empty batch");
  detail::KdEval ev = detail::kd_eval(student, original, adapted, x, t, total, tau);
  LossValue out;
  out.value = ev.value;
  out.grad_params = std::move(ev.grad_params);
  return out;
}

struct InnerResult {
  std::vector<std::vector<double>> source_grads;  // g_j, one per source cluster
  std::vector<double> source_losses;              // L_KD per source cluster
};

// One inner step: G <- G - eta_G * sum_j w_j * g_j, where g_j is the KD
// gradient on source cluster j's training batch, all evaluated at the
// incoming G. Returns the g_j for exact hypergradient reuse. The student's
// running statistics are refreshed with the same w-weighted mixture.
inline InnerResult inner_update(Model& cluster_model, const std::vector<double>& weights,
                                const std::vector<Tensor>& train_batches,
                                const std::vector<const EnsembleTeacher*>& originals,
                                const std::vector<const EnsembleTeacher*>& adapteds,
                                std::size_t t, std::size_t total,
                                const BilevelConfig& cfg) {
  const std::size_t k = weights.size();
  if (train_batches.size() != k || originals.size() != k || adapteds.size() != k)
    throw InputError("inner_update: per-cluster argument count mismatch");
  for (const auto& b : train_batches)
    if (b.batch() == 0) throw InputError("inner_update: empty training split");

  InnerResult res;
  res.source_grads.reserve(k);
  std::vector<std::vector<LayerBatchStats>> stats;
  for (std::size_t j = 0; j < k; ++j) {
    detail::KdEval ev = detail::kd_eval(cluster_model, *originals[j], *adapteds[j],
                                        train_batches[j], t, total, cfg.temperature);
    res.source_grads.push_back(std::move(ev.grad_params));
    res.source_losses.push_back(ev.value);
    stats.push_back(std::move(ev.batch_stats));
  }

  std::vector<double> step(cluster_model.parameter_count(), 0.0);
  for (std::size_t j = 0; j < k; ++j) axpy(weights[j], res.source_grads[j], step);
  cluster_model.add_scaled_to_parameters(-cfg.inner_lr, step);

  if (!stats.empty() && !stats.front().empty()) {
    std::vector<LayerBatchStats> mixed = stats.front();
    for (auto& layer : mixed) {
      std::fill(layer.mean.begin(), layer.mean.end(), 0.0);
      std::fill(layer.var.begin(), layer.var.end(), 0.0);
    }
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t l = 0; l < mixed.size(); ++l) {
        axpy(weights[j], stats[j][l].mean, mixed[l].mean);
        axpy(weights[j], stats[j][l].var, mixed[l].var);
      }
    cluster_model.update_running_stats(mixed, cfg.bn_keep);
  }
  return res;
}

struct OuterResult {
  std::vector<double> hypergradient;  // d(val loss)/d(w_j) through the inner step
  double val_loss = 0.0;
  std::vector<double> weights;  // after the update (unchanged when outer_lr == 0)
};

// Exact first-order hypergradient through the single inner step. Since
// G^(t) = G^(t-1) - eta_G * sum_j w_j g_j with the g_j independent of w,
//   d L_val / d w_j = -eta_G * <grad_G L_val(G^(t)), g_j>.
// The weights then take a projected gradient step. A zero outer learning
// rate performs no update at all, keeping frozen-weight runs bit-identical.
inline OuterResult outer_update(const Model& updated_model,
                                const std::vector<double>& weights,
                                const InnerResult& cached, const Tensor& val_batch,
                                const EnsembleTeacher& original,
                                const EnsembleTeacher& adapted, std::size_t t,
                                std::size_t total, const BilevelConfig& cfg) {
  if (val_batch.batch() == 0) throw InputError("outer_update: empty validation split");
  detail::KdEval ev = detail::kd_eval(updated_model, original, adapted, val_batch, t,
                                      total, cfg.temperature);
  OuterResult res;
  res.val_loss = ev.value;
  res.hypergradient.resize(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j)
    res.hypergradient[j] = -cfg.inner_lr * dot(ev.grad_params, cached.source_grads[j]);

  if (cfg.outer_lr != 0.0) {
    std::vector<double> moved = weights;
    axpy(-cfg.outer_lr, res.hypergradient, moved);
    res.weights = project_simplex(moved);
  } else {
    res.weights = weights;
  }
  return res;
}

enum class WeightMode {
  Learned,           // projected hypergradient descent
  FrozenUniform,     // fixed 1/K
  FrozenSimilarity,  // fixed softmax of negative centroid distances
  FrozenSelf,        // fixed one-hot on the cluster's own data
};

// Softmax of negative Frobenius distances from cluster k's centroid.
inline std::vector<double> similarity_weights(
    const std::vector<std::vector<double>>& centroids, std::size_t k) {
  if (centroids.empty()) throw InputError("similarity_weights: no centroids");
  std::vector<double> score(centroids.size());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centroids.size(); ++j) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < centroids[k].size(); ++i) {
      double diff = centroids[k][i] - centroids[j][i];
      d2 += diff * diff;
    }
    score[j] = -std::sqrt(d2);
    best = std::max(best, score[j]);
  }
  double sum = 0.0;
  for (auto& s : score) {
    s = std::exp(s - best);
    sum += s;
  }
  for (auto& s : score) s /= sum;
  return score;
}

// One cluster's stage-2 state and its recorded histories.
struct ClusterTrainState {
  std::size_t cluster_id = 0;
  Model model;  // G_k
  std::vector<double> weights;
  std::vector<std::vector<double>> weight_history;  // after every iteration
  std::vector<double> val_loss_history;
  std::vector<double> inner_loss_history;  // weighted training loss
};

// Online bi-level optimization for one target cluster over the shared
// snapshot sequence. Snapshot s (1-based iteration t_s) supplies both the
// training batches of every source cluster and the target's validation
// batch; the same lambda(t_s) applies on both levels.
inline ClusterTrainState run_single_cluster(
    std::size_t cluster_id, const std::vector<Trajectory>& trajectories,
    const std::vector<EnsembleTeacher>& originals,
    const std::vector<NoiseAdaptedTeacher>& adapteds, const Architecture& arch,
    const BilevelConfig& cfg, WeightMode mode,
    const std::vector<std::vector<double>>& centroids, std::uint64_t seed) {
  const std::size_t k = trajectories.size();

  ClusterTrainState state{cluster_id,
                          Model(arch),
                          std::vector<double>(k, 1.0 / static_cast<double>(k)),
                          {},
                          {},
                          {}};
  RandomStream ginit = RandomStream::substream(seed, "cluster-model-init", cluster_id);
  state.model = Model::random_init(arch, ginit);

  if (mode == WeightMode::FrozenSimilarity)
    state.weights = similarity_weights(centroids, cluster_id);
  if (mode == WeightMode::FrozenSelf) {
    std::fill(state.weights.begin(), state.weights.end(), 0.0);
    state.weights[cluster_id] = 1.0;
  }

  BilevelConfig eff = cfg;
  if (mode != WeightMode::Learned) eff.outer_lr = 0.0;

  const std::size_t batch = trajectories.front().snapshots.front().batch();
  SplitIndex split = make_split(batch, cfg.train_fraction);

  std::vector<const EnsembleTeacher*> orig_ptrs, adapt_ptrs;
  for (std::size_t j = 0; j < k; ++j) {
    orig_ptrs.push_back(&originals[j]);
    adapt_ptrs.push_back(&adapteds[j].teacher);
  }

  const std::size_t total = trajectories.front().total_iterations;
  const std::size_t snapshots = trajectories.front().snapshots.size();
  for (std::size_t s = 0; s < snapshots; ++s) {
    std::size_t t = trajectories.front().snapshot_iters[s];
    std::vector<Tensor> train_batches;
    train_batches.reserve(k);
    for (std::size_t j = 0; j < k; ++j)
      train_batches.push_back(trajectories[j].snapshots[s].gather_rows(split.train_idx));

    InnerResult inner = inner_update(state.model, state.weights, train_batches,
                                     orig_ptrs, adapt_ptrs, t, total, eff);
    double weighted = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      weighted += state.weights[j] * inner.source_losses[j];
    state.inner_loss_history.push_back(weighted);

    Tensor val_batch = trajectories[cluster_id].snapshots[s].gather_rows(split.val_idx);
    OuterResult outer =
        outer_update(state.model, state.weights, inner, val_batch,
                     originals[cluster_id], adapteds[cluster_id].teacher, t, total, eff);
    state.weights = outer.weights;
    state.val_loss_history.push_back(outer.val_loss);
    state.weight_history.push_back(state.weights);
    validate_weight_vector(state.weights);
  }
  return state;
}

// Stage 2 for every cluster. Clusters are mutually independent given the
// read-only trajectories and teachers.
inline std::vector<ClusterTrainState> run_online_bilevel(
    const std::vector<Trajectory>& trajectories,
    const std::vector<EnsembleTeacher>& originals,
    const std::vector<NoiseAdaptedTeacher>& adapteds, const Architecture& arch,
    const BilevelConfig& cfg, WeightMode mode,
    const std::vector<std::vector<double>>& centroids, std::uint64_t seed) {
  const std::size_t k = trajectories.size();
  if (k == 0) throw InputError("run_online_bilevel: no clusters");
  if (originals.size() != k || adapteds.size() != k)
    throw InputError("run_online_bilevel: teacher count mismatch");
  if (!(cfg.inner_lr > 0.0)) throw InputError("run_online_bilevel: inner_lr must be > 0");
  if (cfg.outer_lr < 0.0) throw InputError("run_online_bilevel: outer_lr must be >= 0");
  if (!(cfg.temperature > 0.0))
    throw InputError("run_online_bilevel: temperature must be > 0");
  for (const auto& traj : trajectories) {
    if (traj.snapshots.empty()) throw InputError("run_online_bilevel: empty trajectory");
    if (traj.snapshots.size() != trajectories.front().snapshots.size() ||
        traj.total_iterations != trajectories.front().total_iterations ||
        traj.snapshot_iters != trajectories.front().snapshot_iters)
      throw InputError("run_online_bilevel: trajectory length mismatch");
    if (traj.snapshots.front().batch() != trajectories.front().snapshots.front().batch())
      throw InputError("run_online_bilevel: trajectory batch size mismatch");
  }

  std::vector<ClusterTrainState> states;
  states.reserve(k);
  for (std::size_t c = 0; c < k; ++c)
    states.push_back(run_single_cluster(c, trajectories, originals, adapteds, arch, cfg,
                                        mode, centroids, seed));
  return states;
}

}  // namespace fedbicross
