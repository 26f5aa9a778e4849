#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gmt/grad_check.hpp"
#include "gmt/memory_cell.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

namespace {

using fixtures::from_oracle;
using fixtures::random_cell;
using fixtures::random_matrix;
using fixtures::to_oracle;
using fixtures::to_vec;
using gmt::Matrix;
using gmt::MemoryCell;
using gmt::Real;

MemoryCell blank_cell(std::size_t F, std::size_t H, std::size_t D) {
  std::mt19937_64 rng(0);
  return MemoryCell::create("cell", F, H, D, rng);
}

TEST(TransitionMatrix, ZeroEdgesSplitMassOffDiagonal) {
  MemoryCell c = blank_cell(3, 4, 2);
  Matrix P = gmt::transition_matrix(c.edges);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(P(i, j), i == j ? 0.0 : 0.5);
}

TEST(TransitionMatrix, SingleEdgePreference) {
  MemoryCell c = blank_cell(3, 4, 2);
  c.edges.E.value(0, 1) = 1.0;
  Matrix P = gmt::transition_matrix(c.edges);
  const Real e = std::exp(1.0);
  EXPECT_EQ(P(0, 0), 0.0);
  EXPECT_NEAR(P(0, 1), e / (e + 1.0), 1e-15);
  EXPECT_NEAR(P(0, 2), 1.0 / (e + 1.0), 1e-15);
  EXPECT_NEAR(P(0, 1), 0.7311, 1e-4);
}

TEST(TransitionMatrix, RowStochasticWithZeroDiagonal) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t F = 2 + trial % 9;
    gmt::EdgeGraph g{gmt::Parameter("E", random_matrix(F, F, rng, 3.0))};
    Matrix P = gmt::transition_matrix(g);
    for (std::size_t i = 0; i < F; ++i) {
      Real s = 0.0;
      for (Real v : P.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_EQ(P(i, i), 0.0);
    }
    EXPECT_LE(gmt::max_abs_diff(P, from_oracle(oracle::transition(to_oracle(g.E.value)))), 1e-12);
  }
}

TEST(TransitionMatrix, SingleSlotIsConfigurationError) {
  gmt::EdgeGraph g{gmt::Parameter("E", Matrix(1, 1))};
  EXPECT_THROW(gmt::transition_matrix(g), gmt::ConfigurationError);
}

TEST(SourceRouting, AlignedTokenHitsDistanceFloor) {
  MemoryCell c = blank_cell(2, 4, 2);
  c.bank.C.value = Matrix::from_rows({{1, -1, 0, 0}, {0, 0, 1, -1}});
  Matrix z = Matrix::from_rows({{1, -1, 0, 0}});
  Matrix w = gmt::source_routing(z, c.bank, 1.0, 0.01);
  // logits (100, 1)
  EXPECT_NEAR(w(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(std::log(w(0, 1)), -99.0, 1e-9);
}

TEST(SourceRouting, EquidistantCentroidsGiveUniformWeights) {
  MemoryCell c = blank_cell(4, 4, 2);
  c.bank.C.value = Matrix::from_rows({{1, -1, 0, 0}, {-1, 1, 0, 0}, {0, 0, 1, -1}, {0, 0, -1, 1}});
  Matrix z = Matrix::from_rows({{1, 1, 1, 1}, {3, 3, 3, 3}});
  // orthogonal to every centered centroid direction
  Matrix w = gmt::source_routing(z, c.bank, 0.3, 0.01);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w(t, i), 0.25, 1e-15);
}

TEST(SourceRouting, MatchesTranscriptionOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    MemoryCell c = random_cell(4, 8, 3, rng);
    Matrix z = random_matrix(5, 8, rng);
    const Real tau = 0.1 + 0.9 * (trial % 10) / 9.0;
    Matrix w = gmt::source_routing(z, c.bank, tau, 0.01);
    oracle::Mat Ct = oracle::layer_norm_rows(to_oracle(c.bank.C.value), to_vec(c.bank.ln_c.gain.value),
                                             to_vec(c.bank.ln_c.bias.value), 1e-5);
    EXPECT_LE(gmt::max_abs_diff(w, from_oracle(oracle::source_routing(to_oracle(z), Ct, tau, 0.01))), 1e-12);
  }
}

TEST(SourceRouting, InvariantToTokenScale) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<Real> scale(0.01, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    MemoryCell c = random_cell(6, 8, 3, rng);
    Matrix z = random_matrix(3, 8, rng);
    Matrix a = gmt::source_routing(z, c.bank, 0.5, 0.01);
    Matrix b = gmt::source_routing(z * scale(rng), c.bank, 0.5, 0.01);
    EXPECT_LE(gmt::max_abs_diff(a, b), 1e-12);
  }
}

TEST(SourceRouting, ZeroTokenIsDomainError) {
  std::mt19937_64 rng(3);
  MemoryCell c = random_cell(4, 8, 3, rng);
  EXPECT_THROW(gmt::source_routing(Matrix(2, 8), c.bank, 1.0, 0.01), gmt::DomainError);
  Matrix z = random_matrix(2, 8, rng);
  EXPECT_THROW(gmt::source_routing(z, c.bank, 0.0, 0.01), gmt::ConfigurationError);
  EXPECT_THROW(gmt::source_routing(z, c.bank, 1.0, 0.0), gmt::ConfigurationError);
}

TEST(TargetSelection, OneHotSourceOnZeroEdges) {
  MemoryCell c = blank_cell(3, 4, 2);
  c.nav.W_Q.value.fill(0.0);
  Matrix z = Matrix::from_rows({{1, 2, 3, 4}});
  Matrix w_src = Matrix::from_rows({{1, 0, 0}});
  auto [w_edge, w_tgt] = gmt::target_selection(z, w_src, gmt::transition_matrix(c.edges), c.nav, c.bank);
  EXPECT_EQ(w_edge, Matrix::from_rows({{0, 0.5, 0.5}}));
  EXPECT_NEAR(w_tgt(0, 0), 0.2326965376188986, 1e-15);
  EXPECT_NEAR(w_tgt(0, 1), 0.3836517311905507, 1e-15);
  EXPECT_NEAR(w_tgt(0, 2), 0.3836517311905507, 1e-15);
}

TEST(TargetSelection, UniformSourceOnSymmetricGraphIsUniform) {
  MemoryCell c = blank_cell(5, 4, 2);
  c.nav.W_K.value.fill(0.0);
  Matrix w_src(2, 5, 0.2);
  auto [w_edge, w_tgt] =
      gmt::target_selection(Matrix(2, 4, 1.0), w_src, gmt::transition_matrix(c.edges), c.nav, c.bank);
  for (Real v : w_tgt.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(TargetSelection, MatchesTranscriptionOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    MemoryCell c = random_cell(4, 8, 3, rng);
    Matrix z = random_matrix(5, 8, rng);
    Matrix w_src = fixtures::random_simplex(5, 4, rng);
    Matrix P = gmt::transition_matrix(c.edges);
    auto [w_edge, w_tgt] = gmt::target_selection(z, w_src, P, c.nav, c.bank);
    oracle::Mat Ct = oracle::layer_norm_rows(to_oracle(c.bank.C.value), to_vec(c.bank.ln_c.gain.value),
                                             to_vec(c.bank.ln_c.bias.value), 1e-5);
    oracle::Targets ref = oracle::target_selection(to_oracle(z), to_oracle(w_src), to_oracle(P),
                                                   to_oracle(c.nav.W_Q.value), to_oracle(c.nav.W_K.value), Ct);
    EXPECT_LE(gmt::max_abs_diff(w_edge, from_oracle(ref.w_edge)), 1e-12);
    EXPECT_LE(gmt::max_abs_diff(w_tgt, from_oracle(ref.w_tgt)), 1e-12);
  }
}

TEST(DisplacementReadout, CoincidentStatesGiveExactZero) {
  std::mt19937_64 rng(41);
  MemoryCell c = random_cell(4, 8, 3, rng);
  c.nav.ln_disp.bias.value.fill(0.0);
  Matrix w = fixtures::random_simplex(3, 4, rng);
  Matrix d = gmt::displacement_readout(w, w, c.bank, c.nav);
  EXPECT_EQ(d, Matrix(3, 8));
}

TEST(DisplacementReadout, ZeroGateHalvesNormalizedDifference) {
  std::mt19937_64 rng(42);
  MemoryCell c = random_cell(4, 8, 3, rng);
  c.bank.gate.value = Matrix::scalar(0.0);
  Matrix ws = fixtures::random_simplex(3, 4, rng), wt = fixtures::random_simplex(3, 4, rng);
  Matrix d = gmt::displacement_readout(ws, wt, c.bank, c.nav);
  Matrix Ct = gmt::normalized_centroids(c.bank);
  Matrix ln = gmt::layer_norm(gmt::matmul(wt, Ct) - gmt::matmul(ws, Ct), c.nav.ln_disp.gain.value,
                              c.nav.ln_disp.bias.value);
  EXPECT_EQ(d, ln * 0.5);
}

TEST(DisplacementReadout, MatchesTranscriptionOracle) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    MemoryCell c = random_cell(4, 8, 3, rng);
    Matrix ws = fixtures::random_simplex(5, 4, rng), wt = fixtures::random_simplex(5, 4, rng);
    Matrix d = gmt::displacement_readout(ws, wt, c.bank, c.nav);
    oracle::Mat Ct = oracle::layer_norm_rows(to_oracle(c.bank.C.value), to_vec(c.bank.ln_c.gain.value),
                                             to_vec(c.bank.ln_c.bias.value), 1e-5);
    oracle::Mat ref = oracle::readout(to_oracle(ws), to_oracle(wt), Ct, c.bank.gate.value.item(),
                                      to_vec(c.nav.ln_disp.gain.value), to_vec(c.nav.ln_disp.bias.value));
    EXPECT_LE(gmt::max_abs_diff(d, from_oracle(ref)), 1e-12);
  }
}

TEST(MemoryCellForward, ClosedGateLeavesStateUnchanged) {
  std::mt19937_64 rng(51);
  MemoryCell c = random_cell(4, 8, 3, rng);
  c.bank.gate.value = Matrix::scalar(-30.0);
  gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
  Matrix h = random_matrix(6, 8, rng);
  gmt::CellForward out = gmt::memory_cell_forward(h, ln2, c, {});
  EXPECT_LE(gmt::max_abs_diff(out.x_next, h), 1e-6);
}

TEST(MemoryCellForward, NonAdaptiveCallIsPure) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 50; ++trial) {
    MemoryCell c = random_cell(5, 8, 3, rng);
    const MemoryCell before = c;
    gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
    Matrix h = random_matrix(4, 8, rng);
    gmt::CellOptions opt;
    opt.tau = 0.4;
    gmt::CellForward a = gmt::memory_cell_forward(h, ln2, c, opt);
    gmt::CellForward b = gmt::memory_cell_forward(h, ln2, c, opt);
    EXPECT_EQ(a.x_next, b.x_next);
    EXPECT_EQ(a.trace.w_tgt, b.trace.w_tgt);
    EXPECT_EQ(c.bank.C.value, before.bank.C.value);
    EXPECT_EQ(c.bank.usage, before.bank.usage);
    EXPECT_EQ(c.bank.age, before.bank.age);
  }
}

TEST(MemoryCellForward, SaturatedMomentumOnlyRenormalizes) {
  std::mt19937_64 rng(53);
  MemoryCell c = random_cell(4, 8, 3, rng);
  c.bank.momentum.value = Matrix::scalar(30.0);
  const Matrix before = c.bank.C.value;
  gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
  gmt::CellOptions opt;
  opt.adaptive = true;
  gmt::memory_cell_forward(random_matrix(6, 8, rng), ln2, c, opt);
  EXPECT_LE(gmt::max_abs_diff(c.bank.C.value, before), 1e-11);
  EXPECT_TRUE(fixtures::unit_rows(c.bank.C.value));
  for (auto a : c.bank.age) EXPECT_EQ(a, 1u);
}

TEST(MemoryCellForward, TapeAndValuePathsAgreeBitForBit) {
  std::mt19937_64 rng(54);
  MemoryCell c = random_cell(4, 8, 3, rng);
  gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
  Matrix h = random_matrix(5, 8, rng);
  gmt::CellOptions opt;
  opt.tau = 0.7;
  gmt::CellForward v = gmt::memory_cell_forward(h, ln2, c, opt);
  gmt::Tape tape;
  gmt::cell::Graph g = gmt::cell::forward(tape, tape.constant(h), ln2, c, opt);
  EXPECT_EQ(g.x_next.value(), v.x_next);
  EXPECT_EQ(g.w_src.value(), v.trace.w_src);
  EXPECT_EQ(g.w_tgt.value(), v.trace.w_tgt);
}

TEST(MemoryCellForward, RoutingInvariantsHoldOnRandomStates) {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<Real> tau(0.1, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t F = 2 + trial % 15;
    MemoryCell c = random_cell(F, 8, 4, rng);
    gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
    gmt::CellOptions opt;
    opt.tau = tau(rng);
    opt.adaptive = trial % 2 == 0;
    gmt::CellForward out = gmt::memory_cell_forward(random_matrix(7, 8, rng, 3.0), ln2, c, opt);
    EXPECT_TRUE(fixtures::simplex_rows(out.trace.w_src));
    EXPECT_TRUE(fixtures::simplex_rows(out.trace.w_edge));
    EXPECT_TRUE(fixtures::simplex_rows(out.trace.w_tgt));
    EXPECT_TRUE(fixtures::unit_rows(c.bank.C.value));
  }
}

TEST(MemoryCellGradients, TaskLossPassesGradCheck) {
  std::mt19937_64 rng(61);
  MemoryCell c = random_cell(4, 8, 4, rng);
  gmt::LayerNormParams ln2 = fixtures::random_ln(8, rng);
  const Matrix h = random_matrix(3, 8, rng);
  const Matrix readout = random_matrix(8, 5, rng, 0.5);
  const std::vector<std::uint32_t> targets{1, 4, 0};
  gmt::CellOptions opt;
  opt.tau = 0.6;
  auto f = [&](gmt::Tape& t) {
    gmt::cell::Graph g = gmt::cell::forward(t, t.constant(h), ln2, c, opt);
    return gmt::ad::cross_entropy(gmt::ad::matmul(g.x_next, t.constant(readout)), targets);
  };
  std::vector<gmt::Parameter*> params = c.parameters();
  params.push_back(&ln2.gain);
  params.push_back(&ln2.bias);
  gmt::GradCheckResult r = gmt::grad_check(f, params);
  EXPECT_LE(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "] analytic " << r.analytic
                                        << " numeric " << r.numeric;
  EXPECT_GT(r.checked, 100u);
}

}  // namespace
