#include "gmt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace gmt {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigurationError(what);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul dimension mismatch: " + a.shape_string() + " x " + b.shape_string());
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  out.eigen().noalias() = a.eigen() * b.eigen();
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt dimension mismatch: " + a.shape_string() + " x " + b.shape_string() + "^T");
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  out.eigen().noalias() = a.eigen() * b.eigen().transpose();
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn dimension mismatch: " + a.shape_string() + "^T x " + b.shape_string());
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  out.eigen().noalias() = a.eigen().transpose() * b.eigen();
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  constexpr Real neg_inf = -std::numeric_limits<Real>::infinity();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    Real mx = neg_inf;
    for (Real v : in) mx = std::max(mx, v);
    if (mx == neg_inf) throw DomainError("softmax over a row that is entirely -inf (row " + std::to_string(r) + ")");
    Real sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      const Real e = in[c] == neg_inf ? 0.0 : std::exp(in[c] - mx);
      o[c] = e;
      sum += e;
    }
    for (Real& v : o) v /= sum;
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Real v : in) mx = std::max(mx, v);
    Real sum = 0.0;
    for (Real v : in) sum += std::exp(v - mx);
    const Real lse = mx + std::log(sum);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Real eps, LayerNormCache* cache) {
  const std::size_t n = x.cols();
  require(gain.size() == n && bias.size() == n,
          "layer_norm affine length mismatch: features " + std::to_string(n) + ", gain " + std::to_string(gain.size()) +
              ", bias " + std::to_string(bias.size()));
  Matrix out(x.rows(), n);
  if (cache) {
    cache->normalized = Matrix(x.rows(), n);
    cache->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    Real mean = 0.0;
    for (Real v : in) mean += v;
    mean /= static_cast<Real>(n);
    Real var = 0.0;
    for (Real v : in) var += (v - mean) * (v - mean);
    var /= static_cast<Real>(n);
    const Real rstd = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      const Real xhat = (in[c] - mean) * rstd;
      if (cache) cache->normalized(r, c) = xhat;
      o[c] = xhat * gain[c] + bias[c];
    }
    if (cache) cache->inv_std[r] = rstd;
  }
  return out;
}

Real gelu(Real x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Real gelu_derivative(Real x) {
  const Real cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const Real pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix gelu(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  return out;
}

Real sigmoid(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

Matrix row_normalize(const Matrix& x, std::vector<Real>* norms) {
  Matrix out(x.rows(), x.cols());
  if (norms) norms->assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    Real sq = 0.0;
    for (Real v : in) sq += v * v;
    const Real norm = std::sqrt(sq);
    if (!(norm > 0.0)) throw DomainError("cannot normalize zero-norm row " + std::to_string(r));
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] / norm;
    if (norms) (*norms)[r] = norm;
  }
  return out;
}

Real cross_entropy(const Matrix& logits, std::span<const std::uint32_t> targets) {
  require(targets.size() == logits.rows(), "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                               std::to_string(logits.rows()) + " rows");
  if (logits.rows() == 0) throw DomainError("cross_entropy over zero positions");
  Real total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] >= logits.cols())
      throw DomainError("target " + std::to_string(targets[r]) + " outside vocabulary of " + std::to_string(logits.cols()));
    auto in = logits.row(r);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Real v : in) mx = std::max(mx, v);
    Real sum = 0.0;
    for (Real v : in) sum += std::exp(v - mx);
    total += mx + std::log(sum) - in[targets[r]];
  }
  return total / static_cast<Real>(logits.rows());
}

Matrix column_mean(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += in[c];
  }
  if (m.rows() > 0) out *= 1.0 / static_cast<Real>(m.rows());
  return out;
}

}  // namespace gmt
