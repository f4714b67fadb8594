#pragma once

#include <cstdint>
#include <vector>

#include "fedbicross/dataset.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/losses.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/training.hpp"

namespace fedbicross {

struct PersonalizationConfig {
  double gamma = 0.5;   // cluster-model KL coefficient
  double delta = 0.3;   // local-model KL coefficient
  std::size_t epochs = 10;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  double temperature = 20.0;
};

struct PersLossTerms {
  double ce = 0.0;
  double kl_cluster = 0.0;
  double kl_local = 0.0;
};

// Three-term personalization loss:
//   CE(f_pers(x), y) + gamma * KL(G(x) || f_pers(x)) + delta * KL(f_i(x) || f_pers(x)).
// All models run in running-stats BN mode, so identical models give exactly
// vanishing KL terms; gradient flows only into f_pers.
inline LossValue personalization_loss(const Model& personalized,
                                      const Model& cluster_model,
                                      const Model& local_model, const Tensor& batch,
                                      const std::vector<std::size_t>& labels,
                                      double gamma, double delta, double tau,
                                      PersLossTerms* terms = nullptr) {
  if (gamma < 0.0 || delta < 0.0)
    throw InputError("personalization_loss: coefficients must be non-negative");
  if (cluster_model.num_classes() != personalized.num_classes() ||
      local_model.num_classes() != personalized.num_classes())
    throw InputError("personalization_loss: output dimension mismatch");

  auto tr = personalized.forward_traced(batch, BnMode::RunningStats);
  LossValue ce = cross_entropy(tr.logits(), labels);
  Tensor cluster_logits = cluster_model.forward(batch, BnMode::RunningStats);
  Tensor local_logits = local_model.forward(batch, BnMode::RunningStats);
  LossValue kl_cluster = kl_divergence(cluster_logits, tr.logits(), tau);
  LossValue kl_local = kl_divergence(local_logits, tr.logits(), tau);

  Tensor dlogits(tr.logits().shape);
  for (std::size_t i = 0; i < dlogits.numel(); ++i)
    dlogits.data[i] = ce.grad_input->data[i] +
                      gamma * kl_cluster.grad_input->data[i] +
                      delta * kl_local.grad_input->data[i];
  Gradients g = tr.backward(dlogits, nullptr, false);

  LossValue out;
  out.value = ce.value + gamma * kl_cluster.value + delta * kl_local.value;
  out.grad_params = std::move(g.params);
  if (terms != nullptr) *terms = {ce.value, kl_cluster.value, kl_local.value};
  return out;
}

struct PersonalizedModel {
  std::size_t client_id = 0;
  Model model;
  std::size_t source_cluster = 0;
  PersLossTerms final_breakdown;
};

// Initializes the personalized model as an exact copy of the cluster model
// (parameters and BN statistics) and fine-tunes it on the client's local
// shard by mini-batch SGD. BN statistics stay frozen: the loss compares
// teacher and student distributions in the same normalization mode, and the
// inherited statistics remain valid for inference. Inputs are untouched.
inline PersonalizedModel personalize(const ClientModel& client, const Dataset& shard,
                                     const Model& cluster_model,
                                     const PersonalizationConfig& cfg,
                                     std::uint64_t seed) {
  if (shard.size() == 0) throw InputError("personalize: empty shard");
  if (cfg.epochs < 1) throw InputError("personalize: epochs must be >= 1");
  if (cfg.batch_size < 1) throw InputError("personalize: batch size must be >= 1");

  RandomStream rng = RandomStream::substream(seed, "personalize", client.id);
  PersonalizedModel out{client.id, cluster_model, 0, {}};

  std::vector<std::size_t> order(shard.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    PersLossTerms epoch_terms;
    std::size_t pos = 0;
    while (pos < order.size()) {
      std::size_t take = std::min(cfg.batch_size, order.size() - pos);
      std::vector<std::size_t> rows(order.begin() + pos, order.begin() + pos + take);
      pos += take;
      Tensor batch = shard.inputs.gather_rows(rows);
      std::vector<std::size_t> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = shard.labels[rows[i]];

      PersLossTerms terms;
      LossValue lv = personalization_loss(out.model, cluster_model, client.model,
                                          batch, labels, cfg.gamma, cfg.delta,
                                          cfg.temperature, &terms);
      out.model.add_scaled_to_parameters(-cfg.lr, *lv.grad_params);
      double f = static_cast<double>(rows.size()) / static_cast<double>(shard.size());
      epoch_terms.ce += terms.ce * f;
      epoch_terms.kl_cluster += terms.kl_cluster * f;
      epoch_terms.kl_local += terms.kl_local * f;
    }
    out.final_breakdown = epoch_terms;
  }
  return out;
}

struct EvaluationReport {
  std::vector<double> per_client;
  double macro_mean = 0.0;
};

// Top-1 accuracy of each client's model on that client's held-out set, plus
// the unweighted mean across clients.
inline EvaluationReport evaluate_per_client(const std::vector<const Model*>& models,
                                            const std::vector<Dataset>& test_sets) {
  if (models.size() != test_sets.size())
    throw InputError("evaluate_per_client: model/test-set count mismatch");
  if (models.empty()) throw InputError("evaluate_per_client: nothing to evaluate");
  EvaluationReport rep;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (test_sets[i].size() == 0)
      throw InputError("evaluate_per_client: empty test set for client " +
                       std::to_string(i));
    rep.per_client.push_back(accuracy(*models[i], test_sets[i]));
    rep.macro_mean += rep.per_client.back();
  }
  rep.macro_mean /= static_cast<double>(models.size());
  return rep;
}

}  // namespace fedbicross
