#pragma once

#include <cstddef>
#include <span>

#include "gmt/memory_cell.hpp"
#include "gmt/tape.hpp"

namespace gmt {

struct LossWeights {
  Real lambda_track = 1.0;
  Real beta_ortho = 0.05;
  Real lambda_cluster = 0.3;
  Real lambda_edge = 0.1;
  Real lambda_contrast = 0.5;
  Real N_target = 32.0;
  Real H_target = 4.0;
  Real eps_log = 1e-8;

  void validate(std::size_t slots) const;
};

/// ū normalized to u = ū/(Σū + eps) and exp of −Σ u·log(u + eps).
Real effective_count(std::span<const Real> mean_usage, Real eps_log);

// Value-level losses.
Real tracking_loss(const Matrix& x_next, const Matrix& w_src, const Matrix& C_tilde, Real m);
Real orthogonality_loss(const Matrix& C);
Real clustering_loss(const Matrix& w_src, Real N_target, Real eps_log);
Real edge_entropy_loss(const Matrix& P, Real H_target, Real eps_log);
Real edge_contrast_loss(const Matrix& P);

namespace obj {

/// (1 − sigmoid(u))·MSE(stopgrad(x_next), w_src·C̃) with u the raw momentum parameter.
Var tracking_loss(Var x_next, Var w_src, Var C_tilde, Var momentum_param);
/// Same loss against an explicit target.
Var tracking_loss(const Matrix& target, Var w_src, Var C_tilde, Var momentum_param);
Var orthogonality_loss(Var C);
Var clustering_loss(Var w_src, Real N_target, Real eps_log);
Var edge_entropy_loss(Var P, Real H_target, Real eps_log);
Var edge_contrast_loss(Var P);

struct AuxTerms {
  Var track;
  Var ortho;
  Var cluster;
  Var edge;
  Var contrast;
};

/// `tracking_target` replaces the detached x_next when given.
AuxTerms block_terms(const cell::Graph& g, const LossWeights& w, const Matrix* tracking_target = nullptr);

/// task + Σ weight·(term summed over blocks). Throws TrainingError on a non-finite result.
Var total_loss(Var task, std::span<const AuxTerms> blocks, const LossWeights& w);

}  // namespace obj

}  // namespace gmt
