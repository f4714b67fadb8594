#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedbicross/clustering.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/losses.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/tensor.hpp"

namespace fedbicross {

enum class SynthOptimizer { Sgd, Adam };

struct SynthConfig {
  std::size_t iterations = 100;  // T
  std::size_t batch = 64;        // B
  double lr = 5e-2;
  double alpha_tv = 2.5e-5;
  double alpha_bn = 10.0;
  double bn_momentum = 0.9;  // beta for noise adaptation
  SynthOptimizer optimizer = SynthOptimizer::Adam;
  std::size_t stride = 1;  // snapshot every `stride` iterations
};

struct DiLossTerms {
  double ce = 0.0;
  double tv = 0.0;
  double bn = 0.0;
};

// Classification-confidence + total-variation + BN-statistic-matching loss
// for input synthesis. The batch goes through every ensemble member in
// BatchStats mode; each member's batch statistics are penalized against that
// member's own running statistics. grad_input is exact.
inline LossValue deep_inversion_loss(const Tensor& x, const EnsembleTeacher& teacher,
                                     const std::vector<std::size_t>& labels,
                                     double alpha_tv, double alpha_bn,
                                     DiLossTerms* terms = nullptr) {
  if (teacher.members.empty()) throw InputError("deep_inversion_loss: empty teacher");
  if (alpha_tv != 0.0 && x.ndim() != 4)
    throw InputError("deep_inversion_loss: TV term needs [batch, C, H, W] input");
  const std::size_t b = x.shape.empty() ? 0 : x.shape[0];
  if (labels.size() != b) throw InputError("deep_inversion_loss: label count mismatch");
  const std::size_t num_members = teacher.members.size();
  const std::size_t classes = teacher.members.front()->num_classes();
  for (std::size_t y : labels)
    if (y >= classes) throw InputError("deep_inversion_loss: label out of range");

  // Forward every member once in inference mode (the confidence term asks
  // the teacher as it would predict at distillation time); the observed
  // per-layer batch statistics feed the BN-matching term.
  std::vector<ForwardTrace> traces;
  traces.reserve(num_members);
  for (const auto& m : teacher.members)
    traces.push_back(m->forward_traced(x, BnMode::RunningStats));

  DiLossTerms t;
  LossValue out;
  Tensor grad_input(x.shape);

  // cross-entropy of the ensemble output on the target labels
  const double inv_b = 1.0 / static_cast<double>(b);
  const double inv_m = 1.0 / static_cast<double>(num_members);
  if (teacher.average_logits) {
    Tensor mean_logits({b, classes});
    for (const auto& tr : traces)
      for (std::size_t i = 0; i < mean_logits.numel(); ++i)
        mean_logits.data[i] += tr.logits().data[i] * inv_m;
    LossValue ce = cross_entropy(mean_logits, labels);
    t.ce = ce.value;
    for (auto& v : ce.grad_input->data) v *= inv_m;
    for (std::size_t m = 0; m < num_members; ++m) {
      BnPenalty pen = bn_regularizer(traces[m].batch_stats(),
                                     teacher.members[m]->bn_states());
      t.bn += pen.value;
      for (auto& layer : pen.grads.d_mean)
        for (auto& v : layer) v *= alpha_bn;
      for (auto& layer : pen.grads.d_var)
        for (auto& v : layer) v *= alpha_bn;
      Gradients g = traces[m].backward(*ce.grad_input,
                                       alpha_bn != 0.0 ? &pen.grads : nullptr, true);
      for (std::size_t i = 0; i < grad_input.numel(); ++i)
        grad_input.data[i] += g.input.data[i];
    }
  } else {
    // probability-averaged ensemble: F = mean of member softmax outputs
    std::vector<Tensor> probs;
    probs.reserve(num_members);
    Tensor ensemble({b, classes});
    for (const auto& tr : traces) {
      probs.push_back(softmax_rows(tr.logits()));
      for (std::size_t i = 0; i < ensemble.numel(); ++i)
        ensemble.data[i] += probs.back().data[i] * inv_m;
    }
    for (std::size_t i = 0; i < b; ++i)
      t.ce -= std::log(std::max(ensemble.at2(i, labels[i]), 1e-300)) * inv_b;

    for (std::size_t m = 0; m < num_members; ++m) {
      // d(ce)/d(member logits): one softmax Jacobian-vector product per row,
      // where d(ce)/d(member prob at y_b) = -inv_b / (M * F[b, y_b])
      Tensor dlogits({b, classes});
      for (std::size_t i = 0; i < b; ++i) {
        std::size_t y = labels[i];
        double gy = -inv_b * inv_m / std::max(ensemble.at2(i, y), 1e-300);
        double inner = gy * probs[m].at2(i, y);
        for (std::size_t j = 0; j < classes; ++j) {
          double pj = probs[m].at2(i, j);
          dlogits.at2(i, j) = pj * ((j == y ? gy : 0.0) - inner);
        }
      }
      BnPenalty pen = bn_regularizer(traces[m].batch_stats(),
                                     teacher.members[m]->bn_states());
      t.bn += pen.value;
      for (auto& layer : pen.grads.d_mean)
        for (auto& v : layer) v *= alpha_bn;
      for (auto& layer : pen.grads.d_var)
        for (auto& v : layer) v *= alpha_bn;
      Gradients g = traces[m].backward(dlogits,
                                       alpha_bn != 0.0 ? &pen.grads : nullptr, true);
      for (std::size_t i = 0; i < grad_input.numel(); ++i)
        grad_input.data[i] += g.input.data[i];
    }
  }

  if (alpha_tv != 0.0) {
    LossValue tv = total_variation(x);
    t.tv = tv.value;
    for (std::size_t i = 0; i < grad_input.numel(); ++i)
      grad_input.data[i] += alpha_tv * tv.grad_input->data[i];
  }

  out.value = t.ce + alpha_tv * t.tv + alpha_bn * t.bn;
  out.grad_input = std::move(grad_input);
  if (terms != nullptr) *terms = t;
  return out;
}

// The full synthesis trace of one cluster: recorded snapshots, the fixed
// balanced target labels, and per-iteration loss terms.
struct Trajectory {
  std::size_t cluster_id = 0;
  std::size_t total_iterations = 0;  // T
  std::vector<Tensor> snapshots;
  std::vector<std::size_t> snapshot_iters;  // 1-based iteration of each snapshot
  std::vector<std::size_t> labels;          // B targets, fixed at initialization
  std::vector<DiLossTerms> losses;          // one entry per iteration
};

// Balanced then shuffled: every class count is floor(B/C) or ceil(B/C).
inline std::vector<std::size_t> balanced_labels(std::size_t batch, std::size_t classes,
                                                RandomStream& rng) {
  std::vector<std::size_t> labels;
  labels.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) labels.push_back(i % classes);
  rng.shuffle(labels);
  return labels;
}

// Gradient-descent input synthesis against a cluster's ensemble teacher,
// recording the trajectory of intermediate batches.
inline Trajectory synthesize_trajectory(const EnsembleTeacher& teacher,
                                        const SynthConfig& cfg, std::uint64_t seed) {
  if (teacher.members.empty()) throw InputError("synthesize_trajectory: empty teacher");
  if (cfg.iterations < 1) throw InputError("synthesize_trajectory: iterations must be >= 1");
  if (cfg.batch < 2) throw InputError("synthesize_trajectory: batch must be >= 2");
  if (cfg.lr < 0.0) throw InputError("synthesize_trajectory: negative learning rate");
  if (cfg.stride < 1) throw InputError("synthesize_trajectory: stride must be >= 1");

  RandomStream rng = RandomStream::substream(seed, "synthesis", teacher.cluster_id);
  const Model& first = *teacher.members.front();

  Trajectory traj;
  traj.cluster_id = teacher.cluster_id;
  traj.total_iterations = cfg.iterations;
  traj.labels = balanced_labels(cfg.batch, first.num_classes(), rng);

  std::vector<std::size_t> shape = {cfg.batch};
  shape.insert(shape.end(), first.input_shape().begin(), first.input_shape().end());
  Tensor x = Tensor::randn(shape, rng);

  // Adam state
  std::vector<double> m1(x.numel(), 0.0), m2(x.numel(), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    DiLossTerms terms;
    LossValue lv = deep_inversion_loss(x, teacher, traj.labels, cfg.alpha_tv,
                                       cfg.alpha_bn, &terms);
    if (!std::isfinite(lv.value) || !lv.grad_input->all_finite())
      throw DivergenceError("synthesis diverged at iteration " + std::to_string(t) +
                                " (loss " + std::to_string(lv.value) + ")",
                            t);
    traj.losses.push_back(terms);

    const std::vector<double>& g = lv.grad_input->data;
    if (cfg.optimizer == SynthOptimizer::Sgd) {
      for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] -= cfg.lr * g[i];
    } else {
      double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::size_t i = 0; i < x.numel(); ++i) {
        m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
        m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
        x.data[i] -= cfg.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
      }
    }

    if (t % cfg.stride == 0 || t == cfg.iterations) {
      traj.snapshots.push_back(x);
      traj.snapshot_iters.push_back(t);
    }
  }
  return traj;
}

// Ensemble clone whose members carry BN running statistics re-estimated over
// a synthesis trajectory.
struct NoiseAdaptedTeacher {
  EnsembleTeacher teacher;
  double momentum = 0.9;
};

// Walks the stored trajectory from most-realistic snapshot back to the
// noisiest, updating adapted statistics per member BN layer:
//   stat <- beta * stat + (1 - beta) * batch_stat(snapshot).
// Members are cloned; the input teacher is never touched.
inline NoiseAdaptedTeacher adapt_teacher_bn(const EnsembleTeacher& teacher,
                                            const Trajectory& trajectory, double beta) {
  if (teacher.members.empty()) throw InputError("adapt_teacher_bn: empty teacher");
  if (trajectory.snapshots.empty())
    throw InputError("adapt_teacher_bn: empty trajectory");
  if (!(beta > 0.0 && beta < 1.0))
    throw InputError("adapt_teacher_bn: momentum must be in (0, 1)");

  NoiseAdaptedTeacher out;
  out.momentum = beta;
  out.teacher.cluster_id = teacher.cluster_id;
  out.teacher.average_logits = teacher.average_logits;
  for (const auto& member : teacher.members) {
    Model clone = *member;
    for (std::size_t s = trajectory.snapshots.size(); s-- > 0;) {
      // statistics observed exactly as the BN-matching term observed them
      auto tr = member->forward_traced(trajectory.snapshots[s], BnMode::RunningStats);
      clone.update_running_stats(tr.batch_stats(), beta);
    }
    out.teacher.members.push_back(std::make_shared<const Model>(std::move(clone)));
  }
  return out;
}

}  // namespace fedbicross
