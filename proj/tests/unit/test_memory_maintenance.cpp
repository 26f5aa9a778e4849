#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gmt/memory_maintenance.hpp"
#include "json.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

namespace {

using fixtures::from_oracle;
using fixtures::random_matrix;
using fixtures::random_simplex;
using fixtures::to_oracle;
using fixtures::unit_rows;
using gmt::CentroidBank;
using gmt::Matrix;
using gmt::Real;

CentroidBank make_bank(std::size_t F, std::size_t H, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gmt::MemoryCell::create("cell", F, H, 2, rng).bank;
}

std::vector<Real> row_of(const Matrix& m, std::size_t r) { return {m.row(r).begin(), m.row(r).end()}; }

Real cosine(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  return oracle::dot(oracle::unit(row_of(a, i)), oracle::unit(row_of(b, j)));
}

// Centroids on orthogonal axes so no pair is similar.
CentroidBank healthy_bank(std::size_t F) {
  CentroidBank bank = make_bank(F, F, 9);
  bank.C.value = Matrix::identity(F);
  bank.age.assign(F, 500);
  return bank;
}

TEST(WriteBack, SaturatedMomentumOnlyRenormalizes) {
  std::mt19937_64 rng(1);
  CentroidBank bank = make_bank(4, 6, 1);
  bank.momentum.value = Matrix::scalar(30.0);
  const Matrix before = bank.C.value;
  gmt::write_back(bank, random_matrix(8, 6, rng), random_simplex(8, 4, rng), 1e-6);
  EXPECT_LE(gmt::max_abs_diff(bank.C.value, before), 1e-12);
}

TEST(WriteBack, ZeroMomentumJumpsToNormalizedMean) {
  std::mt19937_64 rng(2);
  CentroidBank bank = make_bank(5, 6, 2);
  bank.momentum.value = Matrix::scalar(-30.0);
  const Matrix before = bank.C.value;
  Matrix x = random_matrix(4, 6, rng);
  Matrix w(4, 5, 0.1);
  for (std::size_t t = 0; t < 4; ++t) w(t, 3) = 0.6;
  gmt::write_back(bank, x, w, 1e-6);
  oracle::Vec mean(6, 0.0);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < 6; ++k) mean[k] += x(t, k) / 4.0;
  oracle::Vec expected = oracle::unit(mean);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(bank.C.value(3, k), expected[k], 1e-10);
  for (std::size_t i : {0u, 1u, 2u, 4u}) EXPECT_NEAR(cosine(bank.C.value, i, before, i), 1.0, 1e-15);
  for (auto a : bank.age) EXPECT_EQ(a, 1u);
}

TEST(WriteBack, MatchesGroupByArgmaxOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<Real> unif(-4.0, 4.0);
  for (int trial = 0; trial < 100; ++trial) {
    CentroidBank bank = make_bank(4, 6, 100 + trial);
    bank.C.value = random_matrix(4, 6, rng);
    bank.momentum.value = Matrix::scalar(unif(rng));
    Matrix x = random_matrix(9, 6, rng, 2.0), w = random_simplex(9, 4, rng, 2.0);
    oracle::Mat ref = oracle::write_back(to_oracle(bank.C.value), to_oracle(x), to_oracle(w), bank.momentum_value(), 1e-6);
    gmt::write_back(bank, x, w, 1e-6);
    EXPECT_LE(gmt::max_abs_diff(bank.C.value, from_oracle(ref)), 1e-10);
    EXPECT_TRUE(unit_rows(bank.C.value));
  }
}

TEST(UpdateUsage, SmoothingEndpoints) {
  std::mt19937_64 rng(4);
  CentroidBank bank = make_bank(5, 3, 4);
  bank.usage = {0.1, 0.2, 0.3, 0.2, 0.2};
  Matrix w = random_simplex(6, 5, rng);
  gmt::update_usage(bank, w, 1.0);
  EXPECT_EQ(bank.usage, (std::vector<Real>{0.1, 0.2, 0.3, 0.2, 0.2}));
  gmt::update_usage(bank, w, 0.0);
  Matrix mean = gmt::column_mean(w);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(bank.usage[i], mean[i]);
}

TEST(UpdateUsage, UniformBatchesConvergeGeometrically) {
  CentroidBank bank = make_bank(4, 3, 5);
  bank.usage = {1.0, 0.0, 0.0, 0.0};
  const std::vector<Real> start = bank.usage;
  const Real rho = 0.9;
  Matrix w(3, 4, 0.25);
  for (int n = 1; n <= 60; ++n) {
    gmt::update_usage(bank, w, rho);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(bank.usage[i] - 0.25, std::pow(rho, n) * (start[i] - 0.25), 1e-14);
  }
}

TEST(ResetDead, HealthyBankIsUntouched) {
  std::mt19937_64 rng(6);
  CentroidBank bank = make_bank(8, 4, 6);
  const Matrix before = bank.C.value;
  gmt::ResetOutcome r = gmt::reset_dead_centroids(bank, random_matrix(5, 4, rng), 1e-3, rng);
  EXPECT_EQ(r.resets, 0u);
  EXPECT_EQ(bank.C.value, before);
}

TEST(ResetDead, SingleDeadSlotTakesBatchSample) {
  std::mt19937_64 rng(7);
  CentroidBank bank = make_bank(16, 4, 7);
  bank.usage.assign(16, 1.0 / 16);
  bank.usage[5] = 0.0;
  bank.age.assign(16, 40);
  Matrix pool = random_matrix(10, 4, rng);
  gmt::ResetOutcome r = gmt::reset_dead_centroids(bank, pool, 1e-3, rng);
  EXPECT_EQ(r.resets, 1u);
  EXPECT_FALSE(r.random_branch);
  EXPECT_EQ(bank.usage[5], 1.0 / 16);
  EXPECT_EQ(bank.age[5], 0u);
  EXPECT_EQ(bank.age[4], 40u);
  EXPECT_TRUE(unit_rows(bank.C.value));
  bool from_pool = false;
  for (std::size_t p = 0; p < pool.rows(); ++p) from_pool = from_pool || cosine(bank.C.value, 5, pool, p) > 1.0 - 1e-12;
  EXPECT_TRUE(from_pool);
}

TEST(ResetDead, MajorityDeadTakesRandomBranch) {
  std::mt19937_64 rng(8);
  CentroidBank bank = make_bank(16, 4, 8);
  for (std::size_t i = 0; i < 10; ++i) bank.usage[i] = 0.0;
  gmt::ResetOutcome r = gmt::reset_dead_centroids(bank, random_matrix(10, 4, rng), 1e-3, rng);
  EXPECT_EQ(r.resets, 10u);
  EXPECT_TRUE(r.random_branch);
  EXPECT_TRUE(unit_rows(bank.C.value));
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(bank.age[i], 0u);
}

TEST(ResetDead, EmptyPoolFallsBackToRandomDirections) {
  std::mt19937_64 rng(9);
  CentroidBank bank = make_bank(6, 4, 9);
  bank.usage[2] = 0.0;
  gmt::ResetOutcome r = gmt::reset_dead_centroids(bank, Matrix(0, 4), 1e-3, rng);
  EXPECT_EQ(r.resets, 1u);
  EXPECT_TRUE(r.pool_fallback);
  EXPECT_TRUE(unit_rows(bank.C.value));
}

TEST(Merge, DissimilarBankIsUntouched) {
  std::mt19937_64 rng(10);
  CentroidBank bank = healthy_bank(6);
  EXPECT_EQ(gmt::merge_similar_centroids(bank, 0.95, 100, random_matrix(4, 6, rng), rng), 0u);
  EXPECT_EQ(bank.C.value, Matrix::identity(6));
}

TEST(Merge, CooldownProtectsYoungSlots) {
  std::mt19937_64 rng(11);
  CentroidBank bank = healthy_bank(6);
  std::copy(bank.C.value.row(0).begin(), bank.C.value.row(0).end(), bank.C.value.row(1).begin());
  bank.age[1] = 50;
  EXPECT_EQ(gmt::merge_similar_centroids(bank, 0.95, 100, random_matrix(4, 6, rng), rng), 0u);
}

TEST(Merge, KeepsTheMoreUsedSlot) {
  std::mt19937_64 rng(12);
  CentroidBank bank = healthy_bank(6);
  std::copy(bank.C.value.row(2).begin(), bank.C.value.row(2).end(), bank.C.value.row(4).begin());
  bank.usage[2] = 0.3;
  bank.usage[4] = 0.1;
  const Matrix before = bank.C.value;
  EXPECT_EQ(gmt::merge_similar_centroids(bank, 0.95, 100, random_matrix(4, 6, rng), rng), 1u);
  EXPECT_EQ(row_of(bank.C.value, 2), row_of(before, 2));
  EXPECT_EQ(bank.usage[2], 0.3);
  EXPECT_EQ(bank.age[4], 0u);
  EXPECT_EQ(bank.usage[4], 1.0 / 6);
  EXPECT_TRUE(unit_rows(bank.C.value));
}

TEST(Merge, EachSlotChangesAtMostOncePerEvent) {
  std::mt19937_64 rng(13);
  CentroidBank bank = healthy_bank(6);
  for (std::size_t i : {1u, 2u}) std::copy(bank.C.value.row(0).begin(), bank.C.value.row(0).end(), bank.C.value.row(i).begin());
  bank.usage = {0.5, 0.2, 0.1, 0.1, 0.05, 0.05};
  // Pairs (0,1), (0,2), (1,2) all tie at cosine 1; row-major order handles (0,1) first.
  EXPECT_EQ(gmt::merge_similar_centroids(bank, 0.95, 100, Matrix(0, 6), rng), 1u);
  EXPECT_EQ(bank.age[1], 0u);
  EXPECT_EQ(bank.age[2], 500u);
  EXPECT_EQ(row_of(bank.C.value, 0), row_of(Matrix::identity(6), 0));
}

TEST(Maintenance, HealthyBankIsIdempotent) {
  std::mt19937_64 rng(14);
  CentroidBank bank = healthy_bank(8);
  gmt::MaintenanceConfig cfg;
  for (int round = 0; round < 2; ++round) {
    gmt::MaintenanceReport r = gmt::maintenance_step(bank, random_matrix(5, 8, rng), cfg, rng);
    EXPECT_EQ(r.resets, 0u);
    EXPECT_EQ(r.merges, 0u);
    EXPECT_EQ(bank.C.value, Matrix::identity(8));
  }
}

TEST(Maintenance, OneDeadAndOneDuplicatePair) {
  std::mt19937_64 rng(15);
  CentroidBank bank = healthy_bank(8);
  bank.usage.assign(8, 0.125);
  bank.usage[6] = 0.0;
  std::copy(bank.C.value.row(1).begin(), bank.C.value.row(1).end(), bank.C.value.row(3).begin());
  bank.usage[1] = 0.2;
  bank.usage[3] = 0.05;
  gmt::MaintenanceConfig cfg;
  gmt::MaintenanceReport r = gmt::maintenance_step(bank, random_matrix(5, 8, rng), cfg, rng, 110, 1);
  EXPECT_EQ(r.resets, 1u);
  EXPECT_EQ(r.merges, 1u);
  EXPECT_EQ(r.dead_before, 1u);
  EXPECT_EQ(bank.age[3], 0u);
  EXPECT_EQ(bank.age[6], 0u);
  auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j.at("step"), 110);
  EXPECT_EQ(j.at("block"), 1);
  EXPECT_EQ(j.at("resets"), 1);
  EXPECT_EQ(j.at("merges"), 1);
  EXPECT_EQ(j.at("dead_before"), 1);
  EXPECT_TRUE(j.at("mean_cos_sim").is_number());
}

TEST(Maintenance, DeadDuplicateIsResetThenExemptFromMerge) {
  std::mt19937_64 rng(16);
  CentroidBank bank = healthy_bank(8);
  std::copy(bank.C.value.row(2).begin(), bank.C.value.row(2).end(), bank.C.value.row(5).begin());
  bank.usage.assign(8, 0.125);
  bank.usage[5] = 0.0;
  // The pool only holds slot 2's direction, so the reset slot stays a duplicate.
  Matrix pool(1, 8);
  pool(0, 2) = 3.0;
  gmt::MaintenanceReport r = gmt::maintenance_step(bank, pool, {}, rng);
  EXPECT_EQ(r.resets, 1u);
  EXPECT_NEAR(cosine(bank.C.value, 2, bank.C.value, 5), 1.0, 1e-15);
  EXPECT_EQ(r.merges, 0u);
  EXPECT_EQ(bank.age[5], 0u);
}

TEST(Maintenance, CentroidsStayUnitNormUnderRandomOperations) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<Real> unif(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t F = 4 + trial % 12;
    CentroidBank bank = make_bank(F, 6, 1000 + trial);
    for (Real& u : bank.usage) u = unif(rng) < 0.3 ? 0.0 : unif(rng);
    for (auto& a : bank.age) a = static_cast<std::uint64_t>(200 * unif(rng));
    if (trial % 3 == 0) std::copy(bank.C.value.row(0).begin(), bank.C.value.row(0).end(), bank.C.value.row(1).begin());
    gmt::write_back(bank, random_matrix(10, 6, rng, 2.0), random_simplex(10, F, rng, 3.0), 1e-6);
    ASSERT_TRUE(unit_rows(bank.C.value));
    gmt::MaintenanceConfig cfg;
    cfg.tau_merge = 0.5;
    const std::vector<std::uint64_t> ages = bank.age;
    const std::vector<Real> usage = bank.usage;
    const Matrix C = bank.C.value;
    gmt::maintenance_step(bank, random_matrix(3, 6, rng), cfg, rng);
    ASSERT_TRUE(unit_rows(bank.C.value));
    for (std::size_t i = 0; i < F; ++i)
      if (ages[i] < cfg.a_cool && usage[i] >= cfg.delta_dead) EXPECT_EQ(row_of(bank.C.value, i), row_of(C, i));
  }
}

}  // namespace
