#pragma once

#include <cstdint>
#include <vector>

#include "fedbicross/dataset.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/losses.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/rng.hpp"

namespace fedbicross {

// Fraction of old running stats kept per batch during SGD training.
inline constexpr double kTrainBnKeep = 0.9;

struct TrainConfig {
  std::size_t epochs = 40;
  double lr = 1e-2;
  std::size_t batch_size = 32;
};

struct TrainStats {
  std::size_t epochs = 0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

struct ClientModel {
  std::size_t id = 0;
  Model model;
  TrainStats stats;
};

// Mini-batch SGD on cross entropy. Batches of one sample fall back to
// running-stats normalization (batch statistics are degenerate there); a
// trailing singleton is merged into the previous batch instead.
inline TrainStats sgd_train(Model& model, const Dataset& data, const TrainConfig& cfg,
                            RandomStream& rng) {
  if (data.size() == 0) throw InputError("sgd_train: empty dataset");
  if (cfg.epochs == 0) throw InputError("sgd_train: epochs must be >= 1");
  if (cfg.batch_size == 0) throw InputError("sgd_train: batch size must be >= 1");

  TrainStats stats;
  stats.epochs = cfg.epochs;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      std::size_t take = std::min(cfg.batch_size, order.size() - pos);
      // avoid leaving a single trailing sample in BatchStats mode
      if (order.size() - pos - take == 1) ++take;
      std::vector<std::size_t> rows(order.begin() + pos, order.begin() + pos + take);
      pos += take;

      Tensor batch = data.inputs.gather_rows(rows);
      std::vector<std::size_t> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.labels[rows[i]];

      BnMode mode = rows.size() >= 2 ? BnMode::BatchStats : BnMode::RunningStats;
      auto tr = model.forward_traced(batch, mode);
      auto lv = cross_entropy(tr.logits(), labels);
      auto g = tr.backward(*lv.grad_input, nullptr, false);
      model.add_scaled_to_parameters(-cfg.lr, g.params);
      if (mode == BnMode::BatchStats)
        model.update_running_stats(tr.batch_stats(), kTrainBnKeep);
      epoch_loss += lv.value * static_cast<double>(rows.size());
    }
    epoch_loss /= static_cast<double>(data.size());
    stats.epoch_losses.push_back(epoch_loss);
    stats.final_loss = epoch_loss;
  }
  return stats;
}

inline ClientModel train_local(std::size_t id, const Dataset& shard,
                               const Architecture& arch, const TrainConfig& cfg,
                               std::uint64_t seed) {
  if (shard.size() == 0) throw InputError("train_local: empty shard");
  RandomStream rng = RandomStream::substream(seed, "client-train", id);
  ClientModel cm{id, Model::random_init(arch, rng), {}};
  cm.stats = sgd_train(cm.model, shard, cfg, rng);
  return cm;
}

// Top-1 accuracy under running-stats (inference) normalization.
inline double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw InputError("accuracy: empty dataset");
  Tensor logits = model.forward(data.inputs, BnMode::RunningStats);
  std::size_t c = logits.shape[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at2(i, j) > logits.at2(i, best)) best = j;
    if (best == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Single-round parameter averaging: weights proportional to shard sizes
// unless uniform weighting is requested. Running BN statistics are averaged
// with the same weights.
inline Model fedavg_one_shot(const std::vector<ClientModel>& clients,
                             const std::vector<std::size_t>& shard_sizes,
                             bool uniform_weights = false) {
  if (clients.empty()) throw InputError("fedavg_one_shot: no clients");
  if (shard_sizes.size() != clients.size())
    throw InputError("fedavg_one_shot: shard size count mismatch");
  const Architecture& arch = clients.front().model.arch();
  for (const auto& c : clients)
    if (!(c.model.arch() == arch))
      throw InputError("fedavg_one_shot: architecture mismatch between clients");

  std::vector<double> w(clients.size());
  double total = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    w[i] = uniform_weights ? 1.0 : static_cast<double>(shard_sizes[i]);
    total += w[i];
  }
  if (total <= 0.0) throw InputError("fedavg_one_shot: zero total weight");
  for (auto& v : w) v /= total;

  Model out(arch);
  std::vector<double> params(out.parameter_count(), 0.0);
  for (std::size_t i = 0; i < clients.size(); ++i)
    axpy(w[i], clients[i].model.parameters(), params);
  out.set_parameters(std::move(params));

  std::vector<BatchNormState> bn = out.bn_states();
  for (std::size_t l = 0; l < bn.size(); ++l) {
    std::fill(bn[l].running_mean.begin(), bn[l].running_mean.end(), 0.0);
    std::fill(bn[l].running_var.begin(), bn[l].running_var.end(), 0.0);
    for (std::size_t i = 0; i < clients.size(); ++i) {
      const auto& st = clients[i].model.bn_states()[l];
      axpy(w[i], st.running_mean, bn[l].running_mean);
      axpy(w[i], st.running_var, bn[l].running_var);
    }
  }
  out.set_bn_states(std::move(bn));
  return out;
}

}  // namespace fedbicross
