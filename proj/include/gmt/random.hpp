#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "gmt/matrix.hpp"

namespace gmt {

using Rng = std::mt19937_64;

inline Matrix gaussian(std::size_t rows, std::size_t cols, Real stddev, Rng& rng) {
  std::normal_distribution<Real> nd(0.0, stddev);
  Matrix m(rows, cols);
  for (Real& v : m.values()) v = nd(rng);
  return m;
}

/// Gaussian draw normalized to unit length.
inline Matrix random_direction(std::size_t dim, Rng& rng) {
  for (;;) {
    Matrix v = gaussian(1, dim, 1.0, rng);
    Real n = 0.0;
    for (Real x : v.values()) n += x * x;
    if (n > 0.0) {
      v *= 1.0 / std::sqrt(n);
      return v;
    }
  }
}

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace gmt
