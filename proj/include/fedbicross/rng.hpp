#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "fedbicross/errors.hpp"

namespace fedbicross {

// Deterministic random stream: mt19937_64 plus explicitly coded sampling
// transforms. The standard <random> distributions leave their algorithms
// unspecified, which would tie reproducibility to one standard library;
// coding the transforms keeps seeded runs bit-identical everywhere.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  // Named substream so every stage draws from its own independent sequence.
  static RandomStream substream(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (char c : name) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ULL;
    }
    return RandomStream(splitmix64(h));
  }

  static RandomStream substream(std::uint64_t seed, std::string_view name,
                                std::uint64_t index) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (char c : name) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ULL;
    }
    h ^= index + 0x9e3779b97f4a7c15ULL;
    return RandomStream(splitmix64(h));
  }

  // Uniform in [0, 1) with 53 significant bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 handled by boosting.
  double gamma(double shape) {
    if (shape <= 0.0) throw InputError("gamma shape must be positive");
    if (shape < 1.0) {
      double u = 1.0 - uniform();  // (0, 1]
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  // Dirichlet(alpha * 1_n) by normalizing gammas.
  std::vector<double> dirichlet_symmetric(double alpha, std::size_t n) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (auto& v : p) {
      v = gamma(alpha);
      sum += v;
    }
    if (sum <= 0.0) {  // all draws underflowed; fall back to uniform
      for (auto& v : p) v = 1.0 / static_cast<double>(n);
      return p;
    }
    for (auto& v : p) v /= sum;
    return p;
  }

  // Unbiased integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fedbicross
