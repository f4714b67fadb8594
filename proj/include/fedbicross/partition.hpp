#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "fedbicross/dataset.hpp"
#include "fedbicross/errors.hpp"
#include "fedbicross/rng.hpp"

namespace fedbicross {

struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;  // disjoint cover
  double alpha = 0.0;
};

// Class-wise Dirichlet split: for each class, proportions ~ Dir(alpha * 1_N)
// decide how its samples spread over clients. Lower alpha -> more skew.
// Empty clients trigger a bounded redraw, then a repair move from the
// largest client.
inline Partition dirichlet_partition(const Dataset& data, std::size_t num_clients,
                                     double alpha, std::uint64_t seed) {
  if (num_clients < 2) throw InputError("dirichlet_partition: need at least 2 clients");
  if (!(alpha > 0.0)) throw InputError("dirichlet_partition: alpha must be positive");
  if (data.size() < num_clients)
    throw InputError("dirichlet_partition: fewer samples than clients");

  RandomStream rng = RandomStream::substream(seed, "dirichlet-partition");

  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  Partition part;
  part.alpha = alpha;
  const int kMaxAttempts = 20;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    part.client_indices.assign(num_clients, {});
    for (std::size_t c = 0; c < data.num_classes; ++c) {
      std::vector<std::size_t> idx = by_class[c];
      rng.shuffle(idx);
      std::vector<double> prop = rng.dirichlet_symmetric(alpha, num_clients);
      // cumulative rounding keeps the counts summing exactly to idx.size()
      std::size_t taken = 0;
      double cum = 0.0;
      for (std::size_t i = 0; i < num_clients; ++i) {
        cum += prop[i];
        std::size_t upto = i + 1 == num_clients
                               ? idx.size()
                               : static_cast<std::size_t>(std::llround(
                                     cum * static_cast<double>(idx.size())));
        upto = std::min(upto, idx.size());
        for (; taken < upto; ++taken) part.client_indices[i].push_back(idx[taken]);
      }
    }
    bool ok = true;
    for (const auto& ci : part.client_indices) ok = ok && !ci.empty();
    if (ok) return part;
  }

  // Repair: hand one sample from the currently largest client to each empty one.
  for (auto& ci : part.client_indices) {
    if (!ci.empty()) continue;
    auto largest = std::max_element(
        part.client_indices.begin(), part.client_indices.end(),
        [](const auto& a, const auto& b) { return a.size() < b.size(); });
    ci.push_back(largest->back());
    largest->pop_back();
  }
  return part;
}

}  // namespace fedbicross
