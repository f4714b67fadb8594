#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedbicross/errors.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/tensor.hpp"

namespace fedbicross {

struct Dataset {
  Tensor inputs;  // [n, ...]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.inputs = d.inputs.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(d.labels[i]);
  out.num_classes = d.num_classes;
  return out;
}

enum class ToyKind { Blobs, StripedImages };

// Desk-scale synthetic data: Gaussian blobs for the MLP path, tiny procedural
// stripe/blob images for the CNN path (TV and BN terms need image shapes).
struct DatasetSpec {
  ToyKind kind = ToyKind::Blobs;
  std::size_t classes = 4;
  std::size_t samples = 3000;
  std::size_t dim = 2;         // Blobs: feature dimension
  std::size_t image_size = 8;  // StripedImages: images are [1, S, S]
  double noise = 0.35;         // within-class standard deviation
  double separation = 3.0;     // class-center scale / pattern amplitude
};

namespace detail {

// Class centers: on a circle for 2-D, seeded unit directions otherwise.
inline std::vector<std::vector<double>> blob_centers(std::size_t classes,
                                                     std::size_t dim,
                                                     double separation,
                                                     RandomStream& rng) {
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < classes; ++c) {
    if (dim == 2) {
      double a = 2.0 * 3.14159265358979323846 * static_cast<double>(c) /
                 static_cast<double>(classes);
      centers[c][0] = separation * std::cos(a);
      centers[c][1] = separation * std::sin(a);
    } else {
      double norm = 0.0;
      for (auto& v : centers[c]) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : centers[c]) v = separation * v / norm;
    }
  }
  return centers;
}

// Clean base pattern for one class, values in [-1, 1] before amplification.
inline std::vector<double> class_pattern(std::size_t c, std::size_t s) {
  std::vector<double> img(s * s, 0.0);
  std::size_t orient = c % 4;
  double freq = 1.0 + static_cast<double>(c / 4);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      double u = 0.0;
      switch (orient) {
        case 0: u = static_cast<double>(i); break;               // horizontal stripes
        case 1: u = static_cast<double>(j); break;               // vertical stripes
        case 2: u = static_cast<double>(i + j) / 2.0; break;     // diagonal
        default: u = static_cast<double>(i + s - 1 - j) / 2.0;   // anti-diagonal
      }
      img[i * s + j] = std::sin(two_pi * freq * u / static_cast<double>(s));
    }
  }
  return img;
}

}  // namespace detail

inline Dataset make_toy_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw InputError("make_toy_dataset: need at least 2 classes");
  if (spec.samples < spec.classes)
    throw InputError("make_toy_dataset: need at least one sample per class");

  RandomStream rng = RandomStream::substream(seed, "toy-dataset");
  Dataset out;
  out.num_classes = spec.classes;

  // Balanced class counts: first (samples mod classes) classes get one extra.
  std::vector<std::size_t> counts(spec.classes, spec.samples / spec.classes);
  for (std::size_t c = 0; c < spec.samples % spec.classes; ++c) ++counts[c];

  if (spec.kind == ToyKind::Blobs) {
    if (spec.dim < 1) throw InputError("make_toy_dataset: blob dimension must be >= 1");
    auto centers = detail::blob_centers(spec.classes, spec.dim, spec.separation, rng);
    out.inputs = Tensor({spec.samples, spec.dim});
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t k = 0; k < counts[c]; ++k, ++row) {
        for (std::size_t d = 0; d < spec.dim; ++d)
          out.inputs.data[row * spec.dim + d] = centers[c][d] + spec.noise * rng.normal();
        out.labels.push_back(c);
      }
    }
  } else {
    std::size_t s = spec.image_size;
    if (s < 2) throw InputError("make_toy_dataset: image size must be >= 2");
    out.inputs = Tensor({spec.samples, 1, s, s});
    std::vector<std::vector<double>> patterns;
    for (std::size_t c = 0; c < spec.classes; ++c)
      patterns.push_back(detail::class_pattern(c, s));
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t k = 0; k < counts[c]; ++k, ++row) {
        double* px = out.inputs.data.data() + row * s * s;
        for (std::size_t e = 0; e < s * s; ++e)
          px[e] = spec.separation * patterns[c][e] + spec.noise * rng.normal();
        out.labels.push_back(c);
      }
    }
  }
  return out;
}

// Seeded split into (train, held_out) with the requested held-out fraction;
// every class keeps at least one training sample when it can.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double held_out_fraction, RandomStream& rng) {
  if (held_out_fraction < 0.0 || held_out_fraction >= 1.0)
    throw InputError("split_indices: held-out fraction must be in [0, 1)");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  std::size_t held = static_cast<std::size_t>(
      std::floor(held_out_fraction * static_cast<double>(n)));
  if (held == n && n > 0) held = n - 1;
  std::vector<std::size_t> held_out(idx.begin(), idx.begin() + held);
  std::vector<std::size_t> train(idx.begin() + held, idx.end());
  return {train, held_out};
}

}  // namespace fedbicross
