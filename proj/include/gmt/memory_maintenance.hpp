#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "gmt/memory_cell.hpp"
#include "gmt/random.hpp"

namespace gmt {

struct MaintenanceConfig {
  Real rho = 0.99;
  Real delta_dead = 1e-3;
  Real tau_merge = 0.95;
  std::uint64_t a_cool = 100;  // in write-back calls
  std::uint64_t k_maint = 110;
  Real eps_count = 1e-6;

  void validate(std::size_t slots) const;
};

/// Hard-assignment EMA of centroids toward the mean post-block state of their tokens, then
/// renormalization of every row and age += 1. Runs on plain values.
void write_back(CentroidBank& bank, const Matrix& x_next, const Matrix& w_src, Real eps_count);

/// usage ← rho·usage + (1−rho)·mean(w_src rows).
void update_usage(CentroidBank& bank, const Matrix& w_src, Real rho);

struct ResetOutcome {
  std::size_t resets = 0;
  bool random_branch = false;  // more than F/2 slots were dead
  bool pool_fallback = false;  // batch branch with an empty pool
};

/// Replaces slots whose usage is below delta_dead. Up to F/2 dead slots draw normalized rows
/// of `pool`; beyond that every dead slot gets a random unit direction.
ResetOutcome reset_dead_centroids(CentroidBank& bank, const Matrix& pool, Real delta_dead, Rng& rng);

/// Repurposes the lower-usage member of each mature pair with cosine above tau_merge.
/// Pairs are visited by decreasing similarity (row-major on ties); a slot changes at most once.
std::size_t merge_similar_centroids(CentroidBank& bank, Real tau_merge, std::uint64_t a_cool, const Matrix& pool,
                                    Rng& rng);

/// Mean cosine over distinct centroid pairs.
Real mean_pairwise_cosine(const Matrix& C);

struct MaintenanceReport {
  std::uint64_t step = 0;
  std::size_t block = 0;
  std::size_t resets = 0;
  std::size_t merges = 0;
  std::size_t dead_before = 0;
  Real mean_cos_sim = 0.0;

  std::string to_json() const;
};

/// Reset first, then merge.
MaintenanceReport maintenance_step(CentroidBank& bank, const Matrix& pool, const MaintenanceConfig& config, Rng& rng,
                                   std::uint64_t step = 0, std::size_t block = 0);

}  // namespace gmt
