#include "gmt/memory_maintenance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <vector>

#include "json.hpp"

namespace gmt {

namespace {

void normalize_row(std::span<Real> row) {
  Real n = 0.0;
  for (Real v : row) n += v * v;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) throw DomainError("centroid row has zero or non-finite norm");
  for (Real& v : row) v /= n;
}

void assign_row(Matrix& C, std::size_t slot, std::span<const Real> src) {
  std::copy(src.begin(), src.end(), C.row(slot).begin());
}

bool has_norm(std::span<const Real> row) {
  Real n = 0.0;
  for (Real v : row) n += v * v;
  return n > 0.0 && std::isfinite(n);
}

void repurpose(CentroidBank& bank, std::size_t slot, std::span<const Real> direction) {
  assign_row(bank.C.value, slot, direction);
  normalize_row(bank.C.value.row(slot));
  bank.usage[slot] = 1.0 / static_cast<Real>(bank.slots());
  bank.age[slot] = 0;
}

void check_bank(const CentroidBank& bank) {
  if (bank.usage.size() != bank.slots() || bank.age.size() != bank.slots())
    throw ConfigurationError("usage/age length does not match the slot count");
}

// Draws pool rows without replacement until the pool runs out.
class PoolSampler {
 public:
  PoolSampler(const Matrix& pool, Rng& rng) : pool_(pool), rng_(rng), order_(pool.rows()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  bool exhausted() const { return next_ >= order_.size(); }

  Matrix next() {
    while (!exhausted()) {
      auto row = pool_.row(order_[next_++]);
      if (has_norm(row)) return Matrix::row_vector(row);
    }
    return random_direction(pool_.cols(), rng_);
  }

 private:
  const Matrix& pool_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t next_ = 0;
};

}  // namespace

void MaintenanceConfig::validate(std::size_t slots) const {
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigurationError("rho must lie in (0, 1)");
  if (!(delta_dead > 0.0)) throw ConfigurationError("delta_dead must be positive");
  if (slots > 0 && delta_dead >= 1.0 / static_cast<Real>(slots))
    throw ConfigurationError("delta_dead must be below 1/F or every slot counts as dead at uniform usage");
  if (!(tau_merge > 0.0 && tau_merge < 1.0)) throw ConfigurationError("tau_merge must lie in (0, 1)");
  if (k_maint == 0) throw ConfigurationError("k_maint must be at least 1");
  if (!(eps_count > 0.0)) throw ConfigurationError("eps_count must be positive");
}

void write_back(CentroidBank& bank, const Matrix& x_next, const Matrix& w_src, Real eps_count) {
  check_bank(bank);
  const std::size_t F = bank.slots(), H = bank.dim();
  if (x_next.cols() != H || w_src.cols() != F || x_next.rows() != w_src.rows())
    throw ConfigurationError("write_back shapes: x_next " + x_next.shape_string() + ", w_src " + w_src.shape_string());

  Matrix sums(F, H);
  std::vector<std::size_t> counts(F, 0);
  for (std::size_t t = 0; t < w_src.rows(); ++t) {
    auto w = w_src.row(t);
    const std::size_t slot = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    ++counts[slot];
    auto dst = sums.row(slot);
    auto src = x_next.row(t);
    for (std::size_t k = 0; k < H; ++k) dst[k] += src[k];
  }

  const Real m = bank.momentum_value();
  Matrix& C = bank.C.value;
  for (std::size_t i = 0; i < F; ++i) {
    auto c = C.row(i);
    if (counts[i] > 0) {
      const Real denom = std::max(static_cast<Real>(counts[i]), eps_count);
      auto s = sums.row(i);
      for (std::size_t k = 0; k < H; ++k) c[k] = m * c[k] + (1.0 - m) * (s[k] / denom);
    }
    normalize_row(c);
    ++bank.age[i];
  }
}

void update_usage(CentroidBank& bank, const Matrix& w_src, Real rho) {
  check_bank(bank);
  if (w_src.cols() != bank.slots() || w_src.rows() == 0)
    throw ConfigurationError("update_usage expects a nonempty N×F routing matrix");
  const Matrix batch = column_mean(w_src);
  for (std::size_t i = 0; i < bank.slots(); ++i) bank.usage[i] = rho * bank.usage[i] + (1.0 - rho) * batch[i];
}

ResetOutcome reset_dead_centroids(CentroidBank& bank, const Matrix& pool, Real delta_dead, Rng& rng) {
  check_bank(bank);
  const std::size_t F = bank.slots();
  std::vector<std::size_t> dead;
  for (std::size_t i = 0; i < F; ++i)
    if (bank.usage[i] < delta_dead) dead.push_back(i);

  ResetOutcome out;
  out.resets = dead.size();
  if (dead.empty()) return out;

  if (2 * dead.size() > F) {
    out.random_branch = true;
    for (std::size_t slot : dead) repurpose(bank, slot, random_direction(bank.dim(), rng).values());
    return out;
  }

  if (pool.rows() == 0) out.pool_fallback = true;
  else if (pool.cols() != bank.dim()) throw ConfigurationError("reset pool width does not match H");
  PoolSampler sampler(pool, rng);
  for (std::size_t slot : dead) {
    if (sampler.exhausted() && pool.rows() > 0) {
      // More dead slots than pool rows: fall back to sampling with replacement.
      std::uniform_int_distribution<std::size_t> pick(0, pool.rows() - 1);
      auto row = pool.row(pick(rng));
      if (has_norm(row)) {
        repurpose(bank, slot, row);
        continue;
      }
    }
    repurpose(bank, slot, sampler.next().values());
  }
  return out;
}

std::size_t merge_similar_centroids(CentroidBank& bank, Real tau_merge, std::uint64_t a_cool, const Matrix& pool,
                                    Rng& rng) {
  check_bank(bank);
  const std::size_t F = bank.slots();
  if (pool.rows() > 0 && pool.cols() != bank.dim()) throw ConfigurationError("merge pool width does not match H");
  const Matrix Cn = row_normalize(bank.C.value);
  const Matrix G = matmul_nt(Cn, Cn);

  std::vector<std::tuple<Real, std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < F; ++i)
    for (std::size_t j = i + 1; j < F; ++j)
      if (G(i, j) > tau_merge && bank.age[i] >= a_cool && bank.age[j] >= a_cool) pairs.emplace_back(G(i, j), i, j);
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });

  std::vector<bool> touched(F, false);
  PoolSampler sampler(pool, rng);
  std::size_t merges = 0;
  for (const auto& [sim, i, j] : pairs) {
    if (touched[i] || touched[j]) continue;
    const std::size_t loser = bank.usage[j] <= bank.usage[i] ? j : i;
    repurpose(bank, loser, sampler.next().values());
    touched[i] = touched[j] = true;
    ++merges;
  }
  return merges;
}

Real mean_pairwise_cosine(const Matrix& C) {
  const std::size_t F = C.rows();
  if (F < 2) return 0.0;
  const Matrix Cn = row_normalize(C);
  const Matrix G = matmul_nt(Cn, Cn);
  Real s = 0.0;
  for (std::size_t i = 0; i < F; ++i)
    for (std::size_t j = 0; j < F; ++j)
      if (i != j) s += G(i, j);
  return s / static_cast<Real>(F * (F - 1));
}

std::string MaintenanceReport::to_json() const {
  nlohmann::json j = {{"step", step},   {"block", block},         {"resets", resets},
                      {"merges", merges}, {"dead_before", dead_before}, {"mean_cos_sim", mean_cos_sim}};
  return j.dump();
}

MaintenanceReport maintenance_step(CentroidBank& bank, const Matrix& pool, const MaintenanceConfig& config, Rng& rng,
                                   std::uint64_t step, std::size_t block) {
  MaintenanceReport report;
  report.step = step;
  report.block = block;
  report.dead_before = static_cast<std::size_t>(
      std::count_if(bank.usage.begin(), bank.usage.end(), [&](Real u) { return u < config.delta_dead; }));
  report.resets = reset_dead_centroids(bank, pool, config.delta_dead, rng).resets;
  report.merges = merge_similar_centroids(bank, config.tau_merge, config.a_cool, pool, rng);
  report.mean_cos_sim = mean_pairwise_cosine(bank.C.value);
  return report;
}

}  // namespace gmt
