#pragma once

#include "prosody/common.hpp"

#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace prosody {

// Deterministic RNG wrapper. The distribution transforms are spelled out here
// instead of using std::*_distribution, whose sequences are not pinned by the
// standard; identical seeds must yield identical streams for reproducibility
// contracts across builds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform on [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller, no cached second value.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n) by rejection, bias-free.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw NumericError("uniform_int: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(uniform_int(
                    static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Index draw from unnormalized non-negative weights.
  int categorical(std::span<const double> weights) {
    double total = 0;
    for (double w : weights) total += w;
    if (!(total > 0)) throw NumericError("categorical: no mass");
    double u = uniform() * total;
    double acc = 0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  template <class S>
  Vec<S> normal_vec(Index n) {
    Vec<S> v(n);
    for (Index i = 0; i < n; ++i) v[i] = static_cast<S>(normal());
    return v;
  }

  template <class S>
  Mat<S> normal_mat(Index r, Index c) {
    Mat<S> m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(normal());
    return m;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace prosody
