#pragma once

// Value-level dense kernels. The differentiable versions in autodiff.hpp call these
// for their forward pass, so both paths agree bit-for-bit.

#include <cstdint>
#include <span>
#include <vector>

#include "gmt/matrix.hpp"

namespace gmt {

inline constexpr Real kLayerNormEps = 1e-5;

Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Row-wise softmax with per-row max subtraction. Entries equal to -inf map to exactly 0.
/// Throws DomainError when a row is entirely -inf.
Matrix softmax_rows(const Matrix& m);

struct LayerNormCache {
  Matrix normalized;             // (x - mean) * rstd, before the affine map
  std::vector<Real> inv_std;     // per row
};

/// Per-row normalization divided by sqrt(var + eps), then gain/bias. gain and bias are 1×cols.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Real eps = kLayerNormEps,
                  LayerNormCache* cache = nullptr);

/// Exact GELU x·Φ(x) with Φ from erf.
Matrix gelu(const Matrix& x);
Real gelu(Real x);
Real gelu_derivative(Real x);

Real sigmoid(Real x);

/// Rows divided by their L2 norm; zero rows throw DomainError.
Matrix row_normalize(const Matrix& x, std::vector<Real>* norms = nullptr);

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
Real cross_entropy(const Matrix& logits, std::span<const std::uint32_t> targets);

/// log-softmax of each row.
Matrix log_softmax_rows(const Matrix& logits);

/// Mean over rows, returned as 1×cols.
Matrix column_mean(const Matrix& m);

}  // namespace gmt
