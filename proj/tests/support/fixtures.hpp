#pragma once

// Shared test fixtures: conversions to the oracle representation and randomized cells.

#include <cmath>
#include <random>

#include "gmt/matrix.hpp"
#include "gmt/memory_cell.hpp"
#include "oracles/oracles.hpp"

namespace fixtures {

inline gmt::Matrix from_oracle(const oracle::Mat& m) {
  gmt::Matrix out(m.size(), m.empty() ? 0 : m[0].size());
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) out(i, j) = m[i][j];
  return out;
}

inline oracle::Mat to_oracle(const gmt::Matrix& m) {
  oracle::Mat out = oracle::zeros(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline oracle::Vec to_vec(const gmt::Matrix& m) { return {m.values().begin(), m.values().end()}; }

inline gmt::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  return from_oracle(oracle::random_mat(r, c, rng, scale));
}

/// Random simplex rows drawn from a softmax of Gaussian logits.
inline gmt::Matrix random_simplex(std::size_t r, std::size_t c, std::mt19937_64& rng, double spread = 1.0) {
  oracle::Mat logits = oracle::random_mat(r, c, rng, spread);
  return from_oracle(oracle::softmax_rows(logits));
}

/// A cell with every parameter perturbed away from its initial value.
inline gmt::MemoryCell random_cell(std::size_t F, std::size_t H, std::size_t D, std::mt19937_64& rng) {
  gmt::MemoryCell c = gmt::MemoryCell::create("cell", F, H, D, rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  c.edges.E.value = random_matrix(F, F, rng);
  c.nav.W_Q.value = random_matrix(H, D, rng, 0.5);
  c.nav.W_K.value = random_matrix(H, D, rng, 0.5);
  for (gmt::LayerNormParams* ln : {&c.bank.ln_c, &c.nav.ln_disp}) {
    for (double& g : ln->gain.value.values()) g = 1.0 + 0.2 * nd(rng);
    for (double& b : ln->bias.value.values()) b = 0.1 * nd(rng);
  }
  c.bank.gate.value = gmt::Matrix::scalar(nd(rng));
  c.bank.momentum.value = gmt::Matrix::scalar(2.0 + nd(rng));
  return c;
}

inline gmt::LayerNormParams random_ln(std::size_t H, std::mt19937_64& rng) {
  gmt::LayerNormParams ln("ln", H);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& g : ln.gain.value.values()) g = 1.0 + 0.2 * nd(rng);
  for (double& b : ln.bias.value.values()) b = 0.1 * nd(rng);
  return ln;
}

inline bool unit_rows(const gmt::Matrix& C, double tol = 1e-6) {
  for (std::size_t i = 0; i < C.rows(); ++i) {
    double n = 0.0;
    for (double v : C.row(i)) n += v * v;
    if (std::abs(std::sqrt(n) - 1.0) > tol) return false;
  }
  return true;
}

inline bool simplex_rows(const gmt::Matrix& W, double tol = 1e-6) {
  for (std::size_t i = 0; i < W.rows(); ++i) {
    double s = 0.0;
    for (double v : W.row(i)) {
      if (v < 0.0 || v > 1.0) return false;
      s += v;
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

}  // namespace fixtures
