#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "fedbicross/errors.hpp"
#include "fedbicross/losses.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/tensor.hpp"
#include "fedbicross/training.hpp"

namespace fedbicross {

// Softmax outputs of one client on the shared noise probes, [M, C].
struct PredictionMatrix {
  std::size_t client_id = 0;
  Tensor probs;
};

// All clients evaluated on the same standard-normal probe batch, in
// running-stats BN mode; rows are softmax distributions.
inline std::vector<PredictionMatrix> probe_predictions(
    const std::vector<ClientModel>& clients, std::size_t num_probes,
    const std::vector<std::size_t>& input_shape, std::uint64_t seed) {
  if (num_probes < 1) throw InputError("probe_predictions: need at least one probe");
  if (clients.empty()) throw InputError("probe_predictions: no clients");
  for (const auto& c : clients)
    if (c.model.input_shape() != input_shape)
      throw InputError("probe_predictions: client input shape mismatch");

  RandomStream rng = RandomStream::substream(seed, "noise-probes");
  std::vector<std::size_t> shape = {num_probes};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  Tensor probes = Tensor::randn(shape, rng);

  std::vector<PredictionMatrix> out;
  out.reserve(clients.size());
  for (const auto& c : clients)
    out.push_back({c.id, softmax_rows(c.model.forward(probes, BnMode::RunningStats))});
  return out;
}

struct Clustering {
  std::size_t k = 0;
  std::vector<std::size_t> assignment;          // client position -> cluster
  std::vector<std::vector<double>> centroids;   // k flattened [M*C] centroids
  double inertia = 0.0;

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(k);
    for (std::size_t i = 0; i < assignment.size(); ++i)
      out[assignment[i]].push_back(i);
    return out;
  }
};

namespace detail {

inline double sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct LloydResult {
  std::vector<std::size_t> assignment;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // one entry per Lloyd iteration
};

inline LloydResult lloyd_once(const std::vector<std::vector<double>>& points,
                              std::size_t k, RandomStream& rng) {
  const std::size_t n = points.size();
  const std::size_t dim = points.front().size();

  // k-means++ seeding
  std::vector<std::vector<double>> centroids;
  centroids.push_back(points[rng.uniform_index(n)]);
  std::vector<double> d2(n);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, sq_distance(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (u < cum) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);  // duplicated points
    }
    centroids.push_back(points[pick]);
  }

  LloydResult res;
  std::vector<std::size_t> assignment(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    // assign
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double d = sq_distance(points[i], centroids[c]);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assignment[i] = arg;
    }
    // repair empty clusters: move the point farthest from its centroid
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> counts(k, 0);
      for (auto a : assignment) ++counts[a];
      if (counts[c] > 0) continue;
      double worst = -1.0;
      std::size_t donor = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assignment[i]] < 2) continue;
        double d = sq_distance(points[i], centroids[assignment[i]]);
        if (d > worst) {
          worst = d;
          donor = i;
        }
      }
      if (donor < n) assignment[donor] = c;
    }
    // update
    double shift = 0.0;
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) next[assignment[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        next[c] = centroids[c];
        continue;
      }
      for (std::size_t d = 0; d < dim; ++d)
        next[c][d] /= static_cast<double>(counts[c]);
      shift = std::max(shift, sq_distance(next[c], centroids[c]));
    }
    centroids = std::move(next);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      inertia += sq_distance(points[i], centroids[assignment[i]]);
    res.inertia_history.push_back(inertia);
    if (shift < 1e-8 * 1e-8) break;
  }

  res.assignment = assignment;
  res.centroids = std::move(centroids);
  for (std::size_t i = 0; i < n; ++i)
    res.inertia += sq_distance(points[i], res.centroids[assignment[i]]);
  return res;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding, best of 10 restarts by inertia,
// non-empty clusters enforced.
inline Clustering kmeans_cluster(const std::vector<PredictionMatrix>& matrices,
                                 std::size_t k, std::uint64_t seed,
                                 std::size_t restarts = 10) {
  const std::size_t n = matrices.size();
  if (k < 1) throw InputError("kmeans_cluster: k must be >= 1");
  if (k > n) throw InputError("kmeans_cluster: k exceeds the number of clients");

  std::vector<std::vector<double>> points;
  points.reserve(n);
  for (const auto& m : matrices) points.push_back(m.probs.data);

  Clustering best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    RandomStream rng = RandomStream::substream(seed, "kmeans-restart", r);
    detail::LloydResult res = detail::lloyd_once(points, k, rng);
    if (res.inertia < best.inertia) {
      best.k = k;
      best.assignment = std::move(res.assignment);
      best.centroids = std::move(res.centroids);
      best.inertia = res.inertia;
    }
  }
  return best;
}

// Uniform ensemble over member models. Outputs are probabilities: the mean of
// member softmax outputs by default, softmax of mean logits when
// average_logits is set.
struct EnsembleTeacher {
  std::vector<std::shared_ptr<const Model>> members;
  std::size_t cluster_id = 0;
  bool average_logits = false;

  // Probabilities [B, C], teachers in running-stats (inference) BN mode.
  Tensor evaluate(const Tensor& batch) const {
    if (members.empty()) throw InputError("ensemble: no member models");
    if (average_logits) {
      Tensor mean_logits = members.front()->forward(batch, BnMode::RunningStats);
      for (std::size_t m = 1; m < members.size(); ++m) {
        Tensor l = members[m]->forward(batch, BnMode::RunningStats);
        for (std::size_t i = 0; i < l.numel(); ++i) mean_logits.data[i] += l.data[i];
      }
      double inv = 1.0 / static_cast<double>(members.size());
      for (auto& v : mean_logits.data) v *= inv;
      return softmax_rows(mean_logits);
    }
    Tensor probs;
    for (std::size_t m = 0; m < members.size(); ++m) {
      Tensor p = softmax_rows(members[m]->forward(batch, BnMode::RunningStats));
      if (m == 0) {
        probs = std::move(p);
      } else {
        for (std::size_t i = 0; i < p.numel(); ++i) probs.data[i] += p.data[i];
      }
    }
    double inv = 1.0 / static_cast<double>(members.size());
    for (auto& v : probs.data) v *= inv;
    return probs;
  }

  // Log-probabilities usable as the teacher side of a KL loss: softmax of
  // these recovers evaluate() exactly, so temperature softening stays
  // well-defined for probability-averaged ensembles.
  Tensor soft_logits(const Tensor& batch) const {
    Tensor p = evaluate(batch);
    Tensor out(p.shape);
    for (std::size_t i = 0; i < p.numel(); ++i)
      out.data[i] = std::log(std::max(p.data[i], 1e-300));
    return out;
  }
};

inline EnsembleTeacher build_ensemble(std::vector<std::shared_ptr<const Model>> members,
                                      std::size_t cluster_id,
                                      bool average_logits = false) {
  if (members.empty()) throw InputError("build_ensemble: empty member list");
  return {std::move(members), cluster_id, average_logits};
}

// Mean soft-label entropy of an ensemble on a batch (nats).
inline double ensemble_entropy(const EnsembleTeacher& teacher, const Tensor& batch) {
  return mean_row_entropy(teacher.evaluate(batch));
}

}  // namespace fedbicross
