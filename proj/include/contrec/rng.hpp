#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "contrec/common.hpp"

namespace contrec {

// Deterministic random stream. Gaussians are produced by Box-Muller over the
// raw mt19937_64 output so the sequence does not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return eng_() % n;  // modulo bias irrelevant at our scales
  }

  Vec gaussian_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = gaussian();
    return v;
  }

  Mat gaussian_mat(int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = gaussian();
    return m;
  }

  // Derive an independent stream, e.g. one per user at evaluation time.
  Rng fork(std::uint64_t salt) const {
    std::mt19937_64 copy = eng_;
    return Rng(copy() ^ (salt * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace contrec
