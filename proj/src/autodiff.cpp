#include "gmt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace gmt::ad {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ConfigurationError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw ConfigurationError("operands live on different tapes");
  return tape_of(a);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ConfigurationError(std::string(op) + " shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "matmul", {ia, ib}, [ia, ib](const Tape& tp) { return gmt::matmul(tp.value(ia), tp.value(ib)); },
      [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, gmt::matmul_nt(g, tp.value(ib)));
        if (tp.requires_grad(ib)) tp.accumulate(ib, gmt::matmul_tn(tp.value(ia), g));
      });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "matmul_nt", {ia, ib}, [ia, ib](const Tape& tp) { return gmt::matmul_nt(tp.value(ia), tp.value(ib)); },
      [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        if (ia == ib) {
          // x·xᵀ: both operand slots feed the same node.
          Matrix ga = gmt::matmul(g, tp.value(ib));
          ga += gmt::matmul_tn(g, tp.value(ia));
          tp.accumulate(ia, ga);
          return;
        }
        if (tp.requires_grad(ia)) tp.accumulate(ia, gmt::matmul(g, tp.value(ib)));
        if (tp.requires_grad(ib)) tp.accumulate(ib, gmt::matmul_tn(g, tp.value(ia)));
      });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "add", {ia, ib}, [ia, ib](const Tape& tp) { return tp.value(ia) + tp.value(ib); },
      [ia, ib](Tape& tp, std::size_t self) {
        const Matrix g = tp.grad(self);
        tp.accumulate(ia, g);
        tp.accumulate(ib, g);
      });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "sub", {ia, ib}, [ia, ib](const Tape& tp) { return tp.value(ia) - tp.value(ib); },
      [ia, ib](Tape& tp, std::size_t self) {
        const Matrix g = tp.grad(self);
        tp.accumulate(ia, g);
        if (tp.requires_grad(ib)) tp.accumulate(ib, g * -1.0);
      });
}

Var scale(Var a, Real s) { return affine(a, s, 0.0); }

Var affine(Var a, Real alpha, Real beta) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(
      "affine", {ia},
      [ia, alpha, beta](const Tape& tp) {
        Matrix out = tp.value(ia);
        for (Real& v : out.values()) v = alpha * v + beta;
        return out;
      },
      [ia, alpha](Tape& tp, std::size_t self) { tp.accumulate(ia, tp.grad(self) * alpha); });
}

Var scale_by(Var a, Var s) {
  Tape& t = tape_of(a, s);
  if (s.value().size() != 1) throw ConfigurationError("scale_by expects a 1x1 scale, got " + s.value().shape_string());
  const std::size_t ia = a.id(), is = s.id();
  return t.record(
      "scale_by", {ia, is}, [ia, is](const Tape& tp) { return tp.value(ia) * tp.value(is)[0]; },
      [ia, is](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(is)[0]);
        if (tp.requires_grad(is)) {
          const Matrix& av = tp.value(ia);
          Real dot = 0.0;
          for (std::size_t i = 0; i < av.size(); ++i) dot += av[i] * g[i];
          tp.accumulate(is, Matrix::scalar(dot));
        }
      });
}

Var add_constant(Var a, const Matrix& c) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), c, "add_constant");
  const std::size_t ia = a.id();
  return t.record(
      "add_constant", {ia}, [ia, c](const Tape& tp) { return tp.value(ia) + c; },
      [ia](Tape& tp, std::size_t self) { tp.accumulate(ia, tp.grad(self)); }, /*allow_infinite=*/true);
}

Var mul_constant(Var a, const Matrix& c) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), c, "mul_constant");
  const std::size_t ia = a.id();
  return t.record(
      "mul_constant", {ia},
      [ia, c](const Tape& tp) {
        Matrix out = tp.value(ia);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
        return out;
      },
      [ia, c](Tape& tp, std::size_t self) {
        Matrix g = tp.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c[i];
        tp.accumulate(ia, g);
      });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(
      "sigmoid", {ia},
      [ia](const Tape& tp) {
        Matrix out = tp.value(ia);
        for (Real& v : out.values()) v = gmt::sigmoid(v);
        return out;
      },
      [ia](Tape& tp, std::size_t self) {
        const Matrix& y = tp.value(self);
        Matrix g = tp.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
        tp.accumulate(ia, g);
      });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(
      "gelu", {ia}, [ia](const Tape& tp) { return gmt::gelu(tp.value(ia)); },
      [ia](Tape& tp, std::size_t self) {
        const Matrix& x = tp.value(ia);
        Matrix g = tp.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gelu_derivative(x[i]);
        tp.accumulate(ia, g);
      });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(
      "softmax_rows", {ia}, [ia](const Tape& tp) { return gmt::softmax_rows(tp.value(ia)); },
      [ia](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const Matrix& y = tp.value(self);
        const Matrix& g = tp.grad(self);
        Matrix dx(y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          Real dot = 0.0;
          for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
          auto o = dx.row(r);
          for (std::size_t c = 0; c < yr.size(); ++c) o[c] = yr[c] * (gr[c] - dot);
        }
        tp.accumulate(ia, dx);
      });
}

Var layer_norm(Var x, Var gain, Var bias, Real eps) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  auto cache = std::make_shared<LayerNormCache>();
  return t.record(
      "layer_norm", {ix, ig, ib},
      [ix, ig, ib, eps, cache](const Tape& tp) {
        return gmt::layer_norm(tp.value(ix), tp.value(ig), tp.value(ib), eps, cache.get());
      },
      [ix, ig, ib, cache](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        const Matrix& xhat = cache->normalized;
        const Matrix& gain_v = tp.value(ig);
        const std::size_t rows = g.rows(), n = g.cols();
        if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
          Matrix dgain(1, n), dbias(1, n);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) {
              dgain[c] += g(r, c) * xhat(r, c);
              dbias[c] += g(r, c);
            }
          tp.accumulate(ig, dgain);
          tp.accumulate(ib, dbias);
        }
        if (!tp.requires_grad(ix)) return;
        Matrix dx(rows, n);
        std::vector<Real> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            dxhat[c] = g(r, c) * gain_v[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat(r, c);
          }
          mean_d /= static_cast<Real>(n);
          mean_dx /= static_cast<Real>(n);
          const Real rstd = cache->inv_std[r];
          for (std::size_t c = 0; c < n; ++c) dx(r, c) = rstd * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
        }
        tp.accumulate(ix, dx);
      });
}

Var row_normalize(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  auto norms = std::make_shared<std::vector<Real>>();
  return t.record(
      "row_normalize", {ia}, [ia, norms](const Tape& tp) { return gmt::row_normalize(tp.value(ia), norms.get()); },
      [ia, norms](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const Matrix& y = tp.value(self);
        const Matrix& g = tp.grad(self);
        Matrix dx(y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          Real dot = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
          const Real inv = 1.0 / (*norms)[r];
          for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = (g(r, c) - y(r, c) * dot) * inv;
        }
        tp.accumulate(ia, dx);
      });
}

Var inverse_distance_logits(Var similarity, Real tau, Real eps) {
  if (!(tau > 0.0)) throw ConfigurationError("routing temperature must be positive");
  if (!(eps > 0.0)) throw ConfigurationError("eps_grav must be positive");
  Tape& t = tape_of(similarity);
  const std::size_t is = similarity.id();
  return t.record(
      "inverse_distance_logits", {is},
      [is, tau, eps](const Tape& tp) {
        Matrix out = tp.value(is);
        for (Real& v : out.values()) v = 1.0 / (tau * std::max(1.0 - v, eps));
        return out;
      },
      [is, tau, eps](Tape& tp, std::size_t self) {
        const Matrix& s = tp.value(is);
        Matrix g = tp.grad(self);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const Real d = 1.0 - s[i];
          g[i] = d > eps ? g[i] / (tau * d * d) : 0.0;
        }
        tp.accumulate(is, g);
      });
}

Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
  Tape& t = tape_of(logits);
  const std::size_t il = logits.id();
  std::vector<std::uint32_t> tg(targets.begin(), targets.end());
  return t.record(
      "cross_entropy", {il}, [il, tg](const Tape& tp) { return Matrix::scalar(gmt::cross_entropy(tp.value(il), tg)); },
      [il, tg](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(il)) return;
        const Real g = tp.grad(self)[0];
        Matrix d = gmt::softmax_rows(tp.value(il));
        const Real inv_n = g / static_cast<Real>(d.rows());
        for (std::size_t r = 0; r < d.rows(); ++r) {
          d(r, tg[r]) -= 1.0;
          for (Real& v : d.row(r)) v *= inv_n;
        }
        tp.accumulate(il, d);
      });
}

Var mse(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mse");
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "mse", {ia, ib},
      [ia, ib](const Tape& tp) {
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(ib);
        Real s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
        return Matrix::scalar(s / static_cast<Real>(x.size()));
      },
      [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(ib);
        const Real k = 2.0 * tp.grad(self)[0] / static_cast<Real>(x.size());
        Matrix d = x - y;
        d *= k;
        tp.accumulate(ia, d);
        if (tp.requires_grad(ib)) tp.accumulate(ib, d * -1.0);
      });
}

Var column_mean(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(
      "column_mean", {ia}, [ia](const Tape& tp) { return gmt::column_mean(tp.value(ia)); },
      [ia](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(ia)) return;
        const Matrix& g = tp.grad(self);
        const Matrix& x = tp.value(ia);
        Matrix d(x.rows(), x.cols());
        const Real inv = 1.0 / static_cast<Real>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) d(r, c) = g[c] * inv;
        tp.accumulate(ia, d);
      });
}

Var offdiag_mean(Var x, int power) {
  if (power != 1 && power != 2) throw ConfigurationError("offdiag_mean supports power 1 or 2");
  if (x.rows() != x.cols() || x.rows() < 2) throw ConfigurationError("offdiag_mean needs a square matrix with F >= 2");
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(
      "offdiag_mean", {ix},
      [ix, power](const Tape& tp) {
        const Matrix& m = tp.value(ix);
        const std::size_t f = m.rows();
        Real s = 0.0;
        for (std::size_t i = 0; i < f; ++i)
          for (std::size_t j = 0; j < f; ++j)
            if (i != j) s += power == 2 ? m(i, j) * m(i, j) : m(i, j);
        return Matrix::scalar(s / static_cast<Real>(f * (f - 1)));
      },
      [ix, power](Tape& tp, std::size_t self) {
        const Matrix& m = tp.value(ix);
        const std::size_t f = m.rows();
        const Real k = tp.grad(self)[0] / static_cast<Real>(f * (f - 1));
        Matrix d(f, f);
        for (std::size_t i = 0; i < f; ++i)
          for (std::size_t j = 0; j < f; ++j)
            if (i != j) d(i, j) = power == 2 ? 2.0 * m(i, j) * k : k;
        tp.accumulate(ix, d);
      });
}

Var weighted_sum(std::span<const Var> terms, std::span<const Real> weights) {
  if (terms.empty()) throw ConfigurationError("weighted_sum of no terms");
  if (terms.size() != weights.size()) throw ConfigurationError("weighted_sum: terms/weights length mismatch");
  Tape& t = tape_of(terms[0]);
  std::vector<std::size_t> ids;
  for (Var v : terms) {
    tape_of(terms[0], v);
    if (v.value().size() != 1) throw ConfigurationError("weighted_sum expects 1x1 terms");
    ids.push_back(v.id());
  }
  std::vector<Real> w(weights.begin(), weights.end());
  return t.record(
      "weighted_sum", ids,
      [ids, w](const Tape& tp) {
        Real s = 0.0;
        for (std::size_t k = 0; k < ids.size(); ++k) s += w[k] * tp.value(ids[k])[0];
        return Matrix::scalar(s);
      },
      [ids, w](Tape& tp, std::size_t self) {
        const Real g = tp.grad(self)[0];
        for (std::size_t k = 0; k < ids.size(); ++k) tp.accumulate(ids[k], Matrix::scalar(g * w[k]));
      });
}

Var sum(std::span<const Var> terms) {
  std::vector<Real> ones(terms.size(), 1.0);
  return weighted_sum(terms, ones);
}

Var gather_rows(Var table, std::vector<std::uint32_t> ids) {
  Tape& t = tape_of(table);
  const std::size_t it = table.id();
  const std::size_t rows = table.rows();
  for (std::uint32_t id : ids)
    if (id >= rows) throw DomainError("row index " + std::to_string(id) + " outside table of " + std::to_string(rows) + " rows");
  return t.record(
      "gather_rows", {it},
      [it, ids](const Tape& tp) {
        const Matrix& tb = tp.value(it);
        Matrix out(ids.size(), tb.cols());
        for (std::size_t r = 0; r < ids.size(); ++r) std::copy_n(tb.row(ids[r]).data(), tb.cols(), out.row(r).data());
        return out;
      },
      [it, ids](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(it)) return;
        const Matrix& g = tp.grad(self);
        Matrix& dt = tp.grad(it);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          auto src = g.row(r);
          auto dst = dt.row(ids[r]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      });
}

namespace {

struct AttentionCache {
  // Post-softmax probabilities per (sequence, head), each seq_len×seq_len.
  std::vector<EigenMatrix> probs;
};

}  // namespace

Var causal_attention(Var qkv, std::size_t seq_len, std::size_t heads, std::vector<Real> dropout_mask) {
  Tape& t = tape_of(qkv);
  const std::size_t n = qkv.rows();
  if (seq_len == 0 || n % seq_len != 0)
    throw ConfigurationError("causal_attention: " + std::to_string(n) + " rows not divisible by seq_len " + std::to_string(seq_len));
  if (qkv.cols() % 3 != 0 || (qkv.cols() / 3) % heads != 0)
    throw ConfigurationError("causal_attention: width " + std::to_string(qkv.cols()) + " incompatible with " + std::to_string(heads) + " heads");
  const std::size_t batch = n / seq_len;
  if (!dropout_mask.empty() && dropout_mask.size() != batch * heads * seq_len * seq_len)
    throw ConfigurationError("causal_attention: dropout mask has wrong size");
  const std::size_t iq = qkv.id();
  auto cache = std::make_shared<AttentionCache>();
  auto mask = std::make_shared<const std::vector<Real>>(std::move(dropout_mask));

  auto forward = [iq, seq_len, heads, batch, cache, mask](const Tape& tp) {
    const Matrix& x = tp.value(iq);
    const std::size_t width = x.cols() / 3;
    const std::size_t dh = width / heads;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
    const auto T = static_cast<Eigen::Index>(seq_len);
    const auto D = static_cast<Eigen::Index>(dh);
    Matrix out(x.rows(), width);
    ConstEigenMap xm = x.eigen();
    EigenMap om = out.eigen();
    cache->probs.assign(batch * heads, EigenMatrix());
    for (std::size_t b = 0; b < batch; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b * seq_len);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto qc = static_cast<Eigen::Index>(h * dh);
        const auto kc = static_cast<Eigen::Index>(width + h * dh);
        const auto vc = static_cast<Eigen::Index>(2 * width + h * dh);
        EigenMatrix scores = (xm.block(r0, qc, T, D) * xm.block(r0, kc, T, D).transpose()) * inv_sqrt;
        for (Eigen::Index i = 0; i < T; ++i) {
          Real mx = -std::numeric_limits<Real>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
          Real s = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            s += scores(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= s;
          for (Eigen::Index j = i + 1; j < T; ++j) scores(i, j) = 0.0;
        }
        EigenMatrix& p = cache->probs[b * heads + h];
        p = std::move(scores);
        if (!mask->empty()) {
          const Real* mk = mask->data() + (b * heads + h) * seq_len * seq_len;
          EigenMatrix dropped = p;
          for (Eigen::Index k = 0; k < T * T; ++k) dropped.data()[k] *= mk[k];
          om.block(r0, qc, T, D).noalias() = dropped * xm.block(r0, vc, T, D);
        } else {
          om.block(r0, qc, T, D).noalias() = p * xm.block(r0, vc, T, D);
        }
      }
    }
    return out;
  };

  auto backward = [iq, seq_len, heads, batch, cache, mask](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(iq)) return;
    const Matrix& x = tp.value(iq);
    const Matrix& g = tp.grad(self);
    const std::size_t width = x.cols() / 3;
    const std::size_t dh = width / heads;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
    const auto T = static_cast<Eigen::Index>(seq_len);
    const auto D = static_cast<Eigen::Index>(dh);
    Matrix dx(x.rows(), x.cols());
    ConstEigenMap xm = x.eigen();
    ConstEigenMap gm = g.eigen();
    EigenMap dm = dx.eigen();
    for (std::size_t b = 0; b < batch; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b * seq_len);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto qc = static_cast<Eigen::Index>(h * dh);
        const auto kc = static_cast<Eigen::Index>(width + h * dh);
        const auto vc = static_cast<Eigen::Index>(2 * width + h * dh);
        const EigenMatrix& p = cache->probs[b * heads + h];
        const auto dout = gm.block(r0, qc, T, D);
        EigenMatrix dprob = dout * xm.block(r0, vc, T, D).transpose();
        if (!mask->empty()) {
          const Real* mk = mask->data() + (b * heads + h) * seq_len * seq_len;
          EigenMatrix dropped = p;
          for (Eigen::Index k = 0; k < T * T; ++k) {
            dropped.data()[k] *= mk[k];
            dprob.data()[k] *= mk[k];
          }
          dm.block(r0, vc, T, D).noalias() = dropped.transpose() * dout;
        } else {
          dm.block(r0, vc, T, D).noalias() = p.transpose() * dout;
        }
        EigenMatrix dscore(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
          Real dot = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) dot += dprob(i, j) * p(i, j);
          for (Eigen::Index j = 0; j <= i; ++j) dscore(i, j) = p(i, j) * (dprob(i, j) - dot) * inv_sqrt;
          for (Eigen::Index j = i + 1; j < T; ++j) dscore(i, j) = 0.0;
        }
        dm.block(r0, qc, T, D).noalias() = dscore * xm.block(r0, kc, T, D);
        dm.block(r0, kc, T, D).noalias() = dscore.transpose() * xm.block(r0, qc, T, D);
      }
    }
    tp.accumulate(iq, dx);
  };

  return t.record("causal_attention", {iq}, std::move(forward), std::move(backward));
}

}  // namespace gmt::ad
