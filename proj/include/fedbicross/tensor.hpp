#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "fedbicross/errors.hpp"
#include "fedbicross/rng.hpp"

namespace fedbicross {

// Dense n-dimensional array of doubles, row-major. The universal value
// carrier: batches, logits, gradients, synthetic images.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw InputError("tensor data length does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  static Tensor randn(std::vector<std::size_t> s, RandomStream& rng) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.normal();
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape[i]; }
  // Leading dimension is the batch axis everywhere in this library.
  std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
  // Per-sample element count.
  std::size_t sample_size() const {
    return shape.empty() ? 0 : numel() / (shape[0] == 0 ? 1 : shape[0]);
  }

  double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<std::size_t> s) const {
    if (numel_of(s) != data.size())
      throw InputError("reshape changes element count");
    return Tensor(std::move(s), data);
  }

  // Rows i of a [B, ...] tensor gathered into a new tensor, same trailing shape.
  Tensor gather_rows(const std::vector<std::size_t>& rows) const {
    if (shape.empty()) throw InputError("gather_rows on rank-0 tensor");
    std::size_t ss = sample_size();
    std::vector<std::size_t> s = shape;
    s[0] = rows.size();
    Tensor out(std::move(s));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t e = 0; e < ss; ++e)
        out.data[r * ss + e] = data[rows[r] * ss + e];
    return out;
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double a, const std::vector<double>& x, std::vector<double>& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace fedbicross
