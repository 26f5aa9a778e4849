#pragma once

// Differentiable primitives. Every op records a forward closure (used for the value and
// for replay) and a backward closure with its analytic gradient.

#include <cstdint>
#include <span>
#include <vector>

#include "gmt/ops.hpp"
#include "gmt/tape.hpp"

namespace gmt::ad {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, Real s);
/// alpha·a + beta, elementwise.
Var affine(Var a, Real alpha, Real beta);
/// a scaled by the 1×1 node s.
Var scale_by(Var a, Var s);
/// a + c for a constant c (may hold -inf mask entries).
Var add_constant(Var a, const Matrix& c);
/// a ⊙ c for a constant c.
Var mul_constant(Var a, const Matrix& c);

Var sigmoid(Var a);
Var gelu(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, Real eps = kLayerNormEps);
Var row_normalize(Var a);

/// 1 / (tau · max(1 - s, eps)), elementwise.
Var inverse_distance_logits(Var similarity, Real tau, Real eps);

Var cross_entropy(Var logits, std::span<const std::uint32_t> targets);
/// Mean squared difference over all elements.
Var mse(Var a, Var b);
Var column_mean(Var a);
/// Σ_{i≠j} x_ij^power / (F(F-1)) for a square x, power 1 or 2.
Var offdiag_mean(Var x, int power);
/// Weighted sum of 1×1 nodes.
Var weighted_sum(std::span<const Var> terms, std::span<const Real> weights);
/// Sum of 1×1 nodes.
Var sum(std::span<const Var> terms);

/// Rows of `table` selected by `ids`; backward scatter-adds.
Var gather_rows(Var table, std::vector<std::uint32_t> ids);

/// Fused causal multi-head attention core. `qkv` is N×3H with N = batch·seq_len rows,
/// sequences stored contiguously. Returns the concatenated head outputs (N×H), before the
/// output projection. `dropout_mask`, when non-empty, multiplies attention probabilities and
/// has batch·heads·seq_len·seq_len entries (already scaled by 1/(1-p)).
Var causal_attention(Var qkv, std::size_t seq_len, std::size_t heads, std::vector<Real> dropout_mask = {});

}  // namespace gmt::ad
