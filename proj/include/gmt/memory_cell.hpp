#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gmt/autodiff.hpp"
#include "gmt/random.hpp"
#include "gmt/tape.hpp"

namespace gmt {

/// Affine layer norm parameters, gain 1 and bias 0 at construction.
struct LayerNormParams {
  LayerNormParams() = default;
  LayerNormParams(const std::string& prefix, std::size_t dim)
      : gain(prefix + ".gain", Matrix(1, dim, 1.0), false), bias(prefix + ".bias", Matrix(1, dim), false) {}

  Parameter gain;
  Parameter bias;
};

struct CentroidBank {
  Parameter C;  // F×H raw centroids
  LayerNormParams ln_c;
  Parameter gate;      // g, displacement scale sigmoid(g)
  Parameter momentum;  // u, EMA momentum sigmoid(u)
  std::vector<Real> usage;
  std::vector<std::uint64_t> age;

  std::size_t slots() const { return C.value.rows(); }
  std::size_t dim() const { return C.value.cols(); }
  Real momentum_value() const { return sigmoid(momentum.value.item()); }
  Real gate_value() const { return sigmoid(gate.value.item()); }
};

struct EdgeGraph {
  Parameter E;  // F×F raw edge preferences
};

struct NavigationParams {
  Parameter W_Q;  // H×D
  Parameter W_K;  // H×D
  LayerNormParams ln_disp;
};

struct CellInit {
  Real gate = 1.0;
  Real momentum = 4.6;
  Real weight_std = 0.02;
};

struct MemoryCell {
  CentroidBank bank;
  EdgeGraph edges;
  NavigationParams nav;

  /// Unit-sphere centroids, zero edges, Gaussian navigation weights, usage 1/F, age 0.
  static MemoryCell create(const std::string& prefix, std::size_t F, std::size_t H, std::size_t D, Rng& rng,
                           const CellInit& init = {});

  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
};

struct RoutingResult {
  Matrix w_src;
  Matrix w_edge;
  Matrix w_tgt;
  Matrix c_src;
  Matrix c_tgt;
  Matrix displacement;
};

struct CellOptions {
  Real tau = 1.0;
  Real eps_grav = 0.01;
  bool adaptive = false;
  /// Multiplies the displacement before the residual add; 1 leaves the graph untouched.
  Real displacement_scale = 1.0;
  Real rho = 0.99;
  Real eps_count = 1e-6;
};

// Value-level operations.

/// softmax_rows(E + M) with M = -inf on the diagonal. Throws ConfigurationError for F < 2.
Matrix transition_matrix(const EdgeGraph& edges);
/// LN_C(C), the layer-normalized centroids C̃.
Matrix normalized_centroids(const CentroidBank& bank);
Matrix source_routing(const Matrix& z, const CentroidBank& bank, Real tau, Real eps_grav);
std::pair<Matrix, Matrix> target_selection(const Matrix& z, const Matrix& w_src, const Matrix& P,
                                           const NavigationParams& nav, const CentroidBank& bank);
Matrix displacement_readout(const Matrix& w_src, const Matrix& w_tgt, const CentroidBank& bank,
                            const NavigationParams& nav);

struct CellForward {
  Matrix x_next;
  RoutingResult trace;
};

/// x_next = h + d with z = LN₂(h). With options.adaptive the bank is updated afterwards.
CellForward memory_cell_forward(const Matrix& h, const LayerNormParams& ln2, MemoryCell& cell,
                                const CellOptions& options);

// Differentiable graph pieces. Each takes Vars already on one tape.
namespace cell {

Var transition_matrix(Var E);
Var source_routing(Var z, Var C_tilde, Real tau, Real eps_grav);
std::pair<Var, Var> target_selection(Var z, Var w_src, Var P, Var W_Q, Var W_K, Var C_tilde);
struct Readout {
  Var c_src;
  Var c_tgt;
  Var displacement;
};
Readout displacement_readout(Var w_src, Var w_tgt, Var C_tilde, Var gate, Var ln_gain, Var ln_bias);

/// Handles to every intermediate the losses and diagnostics need.
struct Graph {
  Var x_next;
  Var z;
  Var C;
  Var C_tilde;
  Var P;
  Var w_src;
  Var w_edge;
  Var w_tgt;
  Var c_src;
  Var c_tgt;
  Var displacement;
  Var momentum;

  RoutingResult trace() const;
};

/// Records the cell on `tape` with parameters bound as trainable leaves. With options.adaptive,
/// write-back and the usage update run on plain values after the graph is recorded.
Graph forward(Tape& tape, Var h, LayerNormParams& ln2, MemoryCell& cell, const CellOptions& options);

}  // namespace cell

}  // namespace gmt
