#include <cmath>
#include <limits>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "gmt/autodiff.hpp"
#include "gmt/grad_check.hpp"
#include "gmt/ops.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

namespace {

using gmt::Matrix;
using gmt::Parameter;
using gmt::Real;
using gmt::Tape;
using gmt::Var;

using fixtures::from_oracle;
using fixtures::random_matrix;
using fixtures::to_oracle;

TEST(Matmul, IdentityAndAnnihilator) {
  std::mt19937_64 rng(1);
  Matrix m = random_matrix(3, 4, rng);
  EXPECT_EQ(gmt::matmul(Matrix::identity(3), m), m);
  Matrix z = gmt::matmul(Matrix::zeros(2, 3), m);
  EXPECT_EQ(z, Matrix::zeros(2, 4));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(3, 3, rng), b = random_matrix(3, 3, rng);
    Matrix expected = from_oracle(oracle::matmul(to_oracle(a), to_oracle(b)));
    EXPECT_LE(gmt::max_abs_diff(gmt::matmul(a, b), expected), 1e-12);
  }
}

TEST(Matmul, DimensionMismatchIsConfigurationError) {
  EXPECT_THROW(gmt::matmul(Matrix(2, 3), Matrix(2, 3)), gmt::ConfigurationError);
}

TEST(Softmax, SymmetricRowIsUniform) {
  Matrix s = gmt::softmax_rows(Matrix::from_rows({{0, 0, 0}}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(s(0, c), 1.0 / 3.0);
}

TEST(Softmax, MatchesDirectExpOracle) {
  Matrix s = gmt::softmax_rows(Matrix::from_rows({{0, 0.5, 0.5}}));
  // exp/sum oracle: 1/(1+2e^0.5), e^0.5/(1+2e^0.5)
  EXPECT_NEAR(s(0, 0), 0.2326965376188986, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.3836517311905507, 1e-15);
  EXPECT_NEAR(s(0, 2), 0.3836517311905507, 1e-15);
  const auto ref = oracle::softmax({0, 0.5, 0.5});
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s(0, c), ref[c], 1e-15);
}

TEST(Softmax, LargeShiftDoesNotOverflow) {
  for (Real c : {-1e6, -3.0, 0.0, 1e6}) {
    Matrix s = gmt::softmax_rows(Matrix::from_rows({{c, c + 1000}}));
    EXPECT_TRUE(s.all_finite());
    EXPECT_LT(s(0, 0), 1e-300);
    EXPECT_NEAR(s(0, 1), 1.0, 1e-15);
  }
}

TEST(Softmax, NegativeInfinityMapsToZeroAndAllMaskedThrows) {
  constexpr Real ninf = -std::numeric_limits<Real>::infinity();
  Matrix s = gmt::softmax_rows(Matrix::from_rows({{ninf, 1.0, 2.0}}));
  EXPECT_EQ(s(0, 0), 0.0);
  EXPECT_THROW(gmt::softmax_rows(Matrix::from_rows({{ninf, ninf}})), gmt::DomainError);
}

TEST(Softmax, PropertyRowSumsAndShiftInvariance) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<Real> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix m = random_matrix(4, 1 + trial % 9, rng, 3.0);
    Matrix s = gmt::softmax_rows(m);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      Real sum = 0.0;
      for (Real v : s.row(r)) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    Matrix shifted = m;
    const Real c = shift(rng);
    for (Real& v : shifted.values()) v += c;
    EXPECT_LE(gmt::max_abs_diff(gmt::softmax_rows(shifted), s), 1e-12);
  }
}

TEST(LayerNorm, ConstantRowMapsToBias) {
  Matrix gain(1, 4, 1.0), bias = Matrix::from_rows({{0.5, -1.0, 2.0, 0.0}});
  Matrix y = gmt::layer_norm(Matrix(1, 4, 3.7), gain, Matrix(1, 4, 0.0));
  for (Real v : y.values()) EXPECT_EQ(v, 0.0);
  Matrix yb = gmt::layer_norm(Matrix(1, 4, 0.0), gain, bias);
  EXPECT_EQ(yb, bias);
}

TEST(LayerNorm, MatchesMeanVarianceOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix x = random_matrix(3, 8, rng, 2.0), g = random_matrix(1, 8, rng), b = random_matrix(1, 8, rng);
    Matrix y = gmt::layer_norm(x, g, b, 1e-5);
    const auto ov = oracle::layer_norm_rows(to_oracle(x), to_oracle(g)[0], to_oracle(b)[0], 1e-5);
    EXPECT_LE(gmt::max_abs_diff(y, from_oracle(ov)), 1e-10);
  }
}

TEST(LayerNorm, NormalizedMomentsBeforeAffine) {
  // With eps = 0 the pre-affine rows are exactly standardized; with eps > 0 the
  // variance is var/(var+eps).
  std::mt19937_64 rng(5);
  Matrix one(1, 16, 1.0), zero(1, 16, 0.0);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix x = random_matrix(2, 16, rng, 1.0 + trial);
    for (Real eps : {0.0, 1e-5}) {
      Matrix y = gmt::layer_norm(x, one, zero, eps);
      for (std::size_t r = 0; r < 2; ++r) {
        Real mean = 0, var = 0, in_mean = 0, in_var = 0;
        for (std::size_t c = 0; c < 16; ++c) {
          mean += y(r, c);
          in_mean += x(r, c);
        }
        mean /= 16;
        in_mean /= 16;
        for (std::size_t c = 0; c < 16; ++c) {
          var += (y(r, c) - mean) * (y(r, c) - mean);
          in_var += (x(r, c) - in_mean) * (x(r, c) - in_mean);
        }
        var /= 16;
        in_var /= 16;
        EXPECT_LE(std::abs(mean), 1e-10);
        EXPECT_LE(std::abs(var - in_var / (in_var + eps)), 1e-8);
      }
    }
  }
}

TEST(LayerNorm, AffineLengthMismatch) {
  EXPECT_THROW(gmt::layer_norm(Matrix(2, 4), Matrix(1, 3, 1.0), Matrix(1, 4)), gmt::ConfigurationError);
}

TEST(Gelu, ZeroReflectionIdentityAndSeriesOracle) {
  EXPECT_EQ(gmt::gelu(0.0), 0.0);
  // xΦ(x) + xΦ(-x) = x, i.e. gelu(x) - gelu(-x) = x.
  for (Real x : {-3.0, -1.2, -0.1, 0.3, 1.0, 2.5, 7.0}) EXPECT_NEAR(gmt::gelu(x) - gmt::gelu(-x), x, 1e-14);
  EXPECT_NEAR(gmt::gelu(1.0), oracle::gelu_series(1.0), 1e-14);
  EXPECT_NEAR(gmt::gelu(1.0), 0.8413447460685429, 1e-15);
}

TEST(CrossEntropy, UniformLogitsAndConfidentClass) {
  std::vector<std::uint32_t> t = {3, 100};
  EXPECT_NEAR(gmt::cross_entropy(Matrix(2, 257, 0.0), t), std::log(257.0), 1e-12);
  EXPECT_NEAR(std::log(257.0), 5.549, 1e-3);
  Matrix confident(1, 5, 0.0);
  confident(0, 2) = 30.0;
  std::vector<std::uint32_t> t2 = {2};
  EXPECT_LT(gmt::cross_entropy(confident, t2), 1e-9);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::uint32_t> cls(0, 6);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix logits = random_matrix(4, 7, rng, 3.0);
    std::vector<std::uint32_t> t(4);
    for (auto& v : t) v = cls(rng);
    EXPECT_NEAR(gmt::cross_entropy(logits, t), oracle::cross_entropy(to_oracle(logits), t), 1e-12);
  }
}

TEST(CrossEntropy, OutOfRangeTargetIsDomainError) {
  std::vector<std::uint32_t> t = {7};
  EXPECT_THROW(gmt::cross_entropy(Matrix(1, 7), t), gmt::DomainError);
}

TEST(Tape, RejectsNonFiniteValues) {
  Tape tape;
  Var a = tape.constant(Matrix::from_rows({{1.0, 0.0}}));
  Var b = tape.constant(Matrix::from_rows({{0.0, 0.0}}));
  // 1 - s = 0 < eps → clamped, stays finite
  EXPECT_NO_THROW(gmt::ad::inverse_distance_logits(a, 1.0, 0.01));
  Matrix big(1, 2, 1e308);
  Var c = tape.constant(big);
  EXPECT_THROW(gmt::ad::scale(c, 10.0), gmt::DomainError);
  (void)b;
}

TEST(Tape, ReplayIsBitIdentical) {
  std::mt19937_64 rng(21);
  Parameter w("w", random_matrix(5, 4, rng));
  Parameter g("g", Matrix(1, 4, 1.0)), b("b", Matrix(1, 4, 0.0));
  Tape tape;
  Var x = tape.constant(random_matrix(6, 5, rng));
  Var h = gmt::ad::layer_norm(gmt::ad::matmul(x, tape.param(w)), tape.param(g), tape.param(b));
  Var s = gmt::ad::softmax_rows(gmt::ad::gelu(h));
  std::vector<std::uint32_t> targets = {0, 1, 2, 3, 0, 1};
  Var loss = gmt::ad::cross_entropy(s, targets);
  const Real before = loss.value().item();
  EXPECT_TRUE(tape.replay());
  EXPECT_EQ(loss.value().item(), before);
}

TEST(GradCheck, Square) {
  Parameter theta("theta", Matrix::scalar(3.0));
  std::vector<Parameter*> ps = {&theta};
  auto r = gmt::grad_check([&](Tape& t) {
    Var x = t.param(theta);
    return gmt::ad::mse(x, t.constant(Matrix::scalar(0.0)));
  }, ps);
  EXPECT_NEAR(r.analytic, 6.0, 1e-12);
  EXPECT_NEAR(r.numeric, 6.0, 1e-8);
  EXPECT_LE(r.max_relative_error, 1e-10);
}

TEST(GradCheck, ProjectionCrossEntropy) {
  std::mt19937_64 rng(2);
  Parameter w("w", random_matrix(6, 5, rng, 0.5));
  Matrix x = random_matrix(4, 6, rng);
  std::vector<std::uint32_t> t = {0, 4, 2, 2};
  std::vector<Parameter*> ps = {&w};
  auto r = gmt::grad_check([&](Tape& tp) { return gmt::ad::cross_entropy(gmt::ad::matmul(tp.constant(x), tp.param(w)), t); }, ps,
                           1e-5);
  EXPECT_LE(r.max_relative_error, 1e-6) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(GradCheck, NonFiniteObjectiveIsDomainError) {
  Parameter p("p", Matrix::scalar(1.0));
  std::vector<Parameter*> ps = {&p};
  EXPECT_THROW(gmt::grad_check([&](Tape& t) { return gmt::ad::scale(t.param(p), std::numeric_limits<Real>::infinity()); }, ps),
               gmt::DomainError);
}

// Every registered primitive against central differences on random inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, RelativeErrorBelow1e6) {
  std::mt19937_64 rng(100 + GetParam());
  Parameter a("a", random_matrix(4, 5, rng));
  Parameter b("b", random_matrix(5, 3, rng));
  Parameter c("c", random_matrix(4, 5, rng));
  Parameter g("g", random_matrix(1, 5, rng));
  Parameter bias("bias", random_matrix(1, 5, rng));
  Parameter s("s", random_matrix(1, 1, rng));
  Parameter sq("sq", random_matrix(4, 4, rng));
  Parameter qkv("qkv", random_matrix(6, 12, rng, 0.5));
  Parameter table("table", random_matrix(7, 5, rng));
  std::vector<std::uint32_t> tg = {0, 2, 1, 2};
  Matrix mask(4, 5);
  mask(1, 3) = -std::numeric_limits<Real>::infinity();
  Matrix weights = random_matrix(4, 3, rng);
  std::vector<Real> drop_mask(36);
  std::bernoulli_distribution keep(0.7);
  for (Real& v : drop_mask) v = keep(rng) ? 1.0 / 0.7 : 0.0;

  // Reduces any node to a scalar through a fixed random linear functional Σ R⊙x.
  auto probe = [&](Tape& t, Var x) {
    std::mt19937_64 local(17);
    Matrix r = random_matrix(x.rows(), x.cols(), local);
    return gmt::ad::column_mean(gmt::ad::matmul(gmt::ad::mul_constant(x, r), t.constant(Matrix(x.cols(), 1, 1.0))));
  };

  using Fn = std::function<Var(Tape&)>;
  std::vector<std::pair<std::string, Fn>> cases = {
      {"matmul", [&](Tape& t) { return probe(t, gmt::ad::matmul(t.param(a), t.param(b))); }},
      {"matmul_nt", [&](Tape& t) { return probe(t, gmt::ad::matmul_nt(t.param(a), t.param(c))); }},
      {"matmul_nt_self", [&](Tape& t) { return probe(t, gmt::ad::matmul_nt(t.param(a), t.param(a))); }},
      {"add_sub", [&](Tape& t) { return probe(t, gmt::ad::sub(gmt::ad::add(t.param(a), t.param(c)), gmt::ad::scale(t.param(c), 3.0))); }},
      {"affine", [&](Tape& t) { return probe(t, gmt::ad::affine(t.param(a), -0.7, 0.3)); }},
      {"scale_by", [&](Tape& t) { return probe(t, gmt::ad::scale_by(t.param(a), t.param(s))); }},
      {"add_constant", [&](Tape& t) { return probe(t, gmt::ad::softmax_rows(gmt::ad::add_constant(t.param(a), mask))); }},
      {"mul_constant", [&](Tape& t) { return probe(t, gmt::ad::mul_constant(t.param(a), Matrix(4, 5, 0.5))); }},
      {"sigmoid", [&](Tape& t) { return probe(t, gmt::ad::sigmoid(t.param(a))); }},
      {"gelu", [&](Tape& t) { return probe(t, gmt::ad::gelu(t.param(a))); }},
      {"softmax", [&](Tape& t) { return probe(t, gmt::ad::softmax_rows(t.param(a))); }},
      {"layer_norm", [&](Tape& t) { return probe(t, gmt::ad::layer_norm(t.param(a), t.param(g), t.param(bias))); }},
      {"row_normalize", [&](Tape& t) { return probe(t, gmt::ad::row_normalize(t.param(a))); }},
      {"inverse_distance",
       [&](Tape& t) {
         Var cos = gmt::ad::matmul_nt(gmt::ad::row_normalize(t.param(a)), gmt::ad::row_normalize(t.param(c)));
         return probe(t, gmt::ad::inverse_distance_logits(cos, 0.7, 0.01));
       }},
      {"cross_entropy", [&](Tape& t) { return gmt::ad::cross_entropy(gmt::ad::matmul(t.param(a), t.param(b)), tg); }},
      {"mse", [&](Tape& t) { return gmt::ad::mse(t.param(a), t.param(c)); }},
      {"column_mean", [&](Tape& t) { return probe(t, gmt::ad::column_mean(t.param(a))); }},
      {"offdiag_mean_1", [&](Tape& t) { return gmt::ad::offdiag_mean(t.param(sq), 1); }},
      {"offdiag_mean_2", [&](Tape& t) { return gmt::ad::offdiag_mean(t.param(sq), 2); }},
      {"weighted_sum",
       [&](Tape& t) {
         std::vector<Var> terms = {probe(t, t.param(a)), probe(t, gmt::ad::sigmoid(t.param(c)))};
         std::vector<Real> w = {0.3, 1.7};
         return gmt::ad::weighted_sum(terms, w);
       }},
      {"gather_rows", [&](Tape& t) { return probe(t, gmt::ad::gather_rows(t.param(table), {3, 0, 3, 6, 1})); }},
      {"causal_attention", [&](Tape& t) { return probe(t, gmt::ad::causal_attention(t.param(qkv), 3, 2)); }},
      {"causal_attention_dropout", [&](Tape& t) { return probe(t, gmt::ad::causal_attention(t.param(qkv), 3, 2, drop_mask)); }},
  };
  std::vector<Parameter*> all = {&a, &b, &c, &g, &bias, &s, &sq, &qkv, &table};
  for (auto& [name, fn] : cases) {
    auto r = gmt::grad_check(fn, all, 1e-5);
    for (const auto& e : r.entries) {
      // Below |g| = 1e-4 the central-difference rounding floor (~1e-11) dominates a
      // relative comparison, so those entries are held to an absolute bound instead.
      if (std::max(std::abs(e.analytic), std::abs(e.numeric)) >= 1e-4) {
        EXPECT_LE(e.relative_error, 1e-6) << name << ": " << e.parameter << "[" << e.index << "] analytic " << e.analytic
                                          << " numeric " << e.numeric;
      } else {
        EXPECT_LE(std::abs(e.analytic - e.numeric), 1e-10) << name << ": " << e.parameter << "[" << e.index << "]";
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Randomized, PrimitiveGradients, ::testing::Range(0, 5));

}  // namespace
