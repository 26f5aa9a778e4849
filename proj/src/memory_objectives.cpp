#include "gmt/memory_objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace gmt {

namespace {

struct UsageEntropy {
  Real sum = 0.0;  // Σū + eps
  std::vector<Real> u;
  Real n_eff = 0.0;
};

UsageEntropy usage_entropy(std::span<const Real> mean_usage, Real eps) {
  UsageEntropy e;
  e.sum = eps;
  for (Real v : mean_usage) e.sum += v;
  Real H = 0.0;
  e.u.resize(mean_usage.size());
  for (std::size_t i = 0; i < mean_usage.size(); ++i) {
    e.u[i] = mean_usage[i] / e.sum;
    H -= e.u[i] * std::log(e.u[i] + eps);
  }
  e.n_eff = std::exp(H);
  return e;
}

Real clustering_value(const Matrix& w_src, Real N_target, Real eps) {
  const Matrix mean = column_mean(w_src);
  const Real n_eff = usage_entropy(mean.values(), eps).n_eff;
  return std::max(N_target / std::max(n_eff, 1.0) - 1.0, 0.0);
}

Real row_entropy(std::span<const Real> row, Real eps) {
  Real h = 0.0;
  for (Real p : row) h -= p * std::log(p + eps);
  return h;
}

Real edge_entropy_value(const Matrix& P, Real H_target, Real eps) {
  Real total = 0.0;
  for (std::size_t i = 0; i < P.rows(); ++i) total += std::max(H_target - row_entropy(P.row(i), eps), 0.0);
  return total / static_cast<Real>(P.rows());
}

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() < 2)
    throw ConfigurationError(std::string(what) + " needs a square matrix with F ≥ 2, got " + m.shape_string());
}

}  // namespace

void LossWeights::validate(std::size_t slots) const {
  for (Real w : {lambda_track, beta_ortho, lambda_cluster, lambda_edge, lambda_contrast})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigurationError("loss weights must be finite and nonnegative");
  if (slots > 0 && N_target > static_cast<Real>(slots)) throw ConfigurationError("N_target exceeds the slot count");
  if (!(N_target >= 0.0)) throw ConfigurationError("N_target must be nonnegative");
  if (!(eps_log > 0.0)) throw ConfigurationError("eps_log must be positive");
}

Real effective_count(std::span<const Real> mean_usage, Real eps_log) { return usage_entropy(mean_usage, eps_log).n_eff; }

Real tracking_loss(const Matrix& x_next, const Matrix& w_src, const Matrix& C_tilde, Real m) {
  const Matrix recon = matmul(w_src, C_tilde);
  if (!recon.same_shape(x_next)) throw ConfigurationError("tracking_loss shape mismatch");
  return (1.0 - m) * (x_next.eigen() - recon.eigen()).squaredNorm() / static_cast<Real>(x_next.size());
}

Real orthogonality_loss(const Matrix& C) {
  Tape t;
  return obj::orthogonality_loss(t.constant(C)).value().item();
}

Real clustering_loss(const Matrix& w_src, Real N_target, Real eps_log) {
  return clustering_value(w_src, N_target, eps_log);
}

Real edge_entropy_loss(const Matrix& P, Real H_target, Real eps_log) {
  require_square(P, "edge_entropy_loss");
  return edge_entropy_value(P, H_target, eps_log);
}

Real edge_contrast_loss(const Matrix& P) {
  Tape t;
  return obj::edge_contrast_loss(t.constant(P)).value().item();
}

namespace obj {

Var tracking_loss(Var x_next, Var w_src, Var C_tilde, Var momentum_param) {
  return tracking_loss(x_next.value(), w_src, C_tilde, momentum_param);
}

Var tracking_loss(const Matrix& target_value, Var w_src, Var C_tilde, Var momentum_param) {
  Tape& t = *w_src.tape();
  Var target = t.constant(target_value);
  Var recon = ad::matmul(w_src, C_tilde);
  Var one_minus_m = ad::affine(ad::sigmoid(momentum_param), -1.0, 1.0);
  return ad::scale_by(ad::mse(target, recon), one_minus_m);
}

Var orthogonality_loss(Var C) {
  if (C.rows() < 2) throw ConfigurationError("orthogonality_loss needs F ≥ 2");
  Var Cn = ad::row_normalize(C);
  return ad::offdiag_mean(ad::matmul_nt(Cn, Cn), 2);
}

Var clustering_loss(Var w_src, Real N_target, Real eps_log) {
  Tape& t = *w_src.tape();
  const std::size_t iw = w_src.id();
  return t.record(
      "clustering_loss", {iw},
      [iw, N_target, eps_log](const Tape& tp) { return Matrix::scalar(clustering_value(tp.value(iw), N_target, eps_log)); },
      [iw, N_target, eps_log](Tape& tp, std::size_t self) {
        const Matrix& w = tp.value(iw);
        const Matrix mean = column_mean(w);
        const UsageEntropy e = usage_entropy(mean.values(), eps_log);
        if (e.n_eff <= 1.0 || N_target / e.n_eff - 1.0 <= 0.0) return;
        const Real g_out = tp.grad(self).item();
        // dL/dH = -N_target/N_eff² · N_eff
        const Real dH = -N_target / e.n_eff * g_out;
        const std::size_t F = w.cols();
        std::vector<Real> du(F);
        for (std::size_t i = 0; i < F; ++i) du[i] = dH * (-std::log(e.u[i] + eps_log) - e.u[i] / (e.u[i] + eps_log));
        Real dot = 0.0;
        for (std::size_t i = 0; i < F; ++i) dot += du[i] * mean[i];
        const Real inv_n = 1.0 / static_cast<Real>(w.rows());
        Matrix g(w.rows(), F);
        for (std::size_t k = 0; k < F; ++k) {
          const Real dmean = du[k] / e.sum - dot / (e.sum * e.sum);
          for (std::size_t r = 0; r < w.rows(); ++r) g(r, k) = dmean * inv_n;
        }
        tp.accumulate(iw, g);
      });
}

Var edge_entropy_loss(Var P, Real H_target, Real eps_log) {
  require_square(P.value(), "edge_entropy_loss");
  Tape& t = *P.tape();
  const std::size_t ip = P.id();
  return t.record(
      "edge_entropy_loss", {ip},
      [ip, H_target, eps_log](const Tape& tp) { return Matrix::scalar(edge_entropy_value(tp.value(ip), H_target, eps_log)); },
      [ip, H_target, eps_log](Tape& tp, std::size_t self) {
        const Matrix& p = tp.value(ip);
        const std::size_t F = p.rows();
        const Real scale = tp.grad(self).item() / static_cast<Real>(F);
        Matrix g(F, F);
        for (std::size_t i = 0; i < F; ++i) {
          if (H_target - row_entropy(p.row(i), eps_log) <= 0.0) continue;
          for (std::size_t j = 0; j < F; ++j)
            g(i, j) = scale * (std::log(p(i, j) + eps_log) + p(i, j) / (p(i, j) + eps_log));
        }
        tp.accumulate(ip, g);
      });
}

Var edge_contrast_loss(Var P) {
  require_square(P.value(), "edge_contrast_loss");
  Var Pn = ad::row_normalize(P);
  return ad::offdiag_mean(ad::matmul_nt(Pn, Pn), 1);
}

AuxTerms block_terms(const cell::Graph& g, const LossWeights& w, const Matrix* tracking_target) {
  const Matrix& target = tracking_target ? *tracking_target : g.x_next.value();
  return {tracking_loss(target, g.w_src, g.C_tilde, g.momentum), orthogonality_loss(g.C),
          clustering_loss(g.w_src, w.N_target, w.eps_log), edge_entropy_loss(g.P, w.H_target, w.eps_log),
          edge_contrast_loss(g.P)};
}

Var total_loss(Var task, std::span<const AuxTerms> blocks, const LossWeights& w) {
  std::vector<Var> terms{task};
  std::vector<Real> weights{1.0};
  if (!blocks.empty()) {
    auto summed = [&](Var AuxTerms::*member) {
      std::vector<Var> parts;
      for (const AuxTerms& b : blocks) parts.push_back(b.*member);
      return ad::sum(parts);
    };
    const std::pair<Var AuxTerms::*, Real> kinds[] = {{&AuxTerms::track, w.lambda_track},
                                                       {&AuxTerms::ortho, w.beta_ortho},
                                                       {&AuxTerms::cluster, w.lambda_cluster},
                                                       {&AuxTerms::edge, w.lambda_edge},
                                                       {&AuxTerms::contrast, w.lambda_contrast}};
    for (const auto& [member, weight] : kinds) {
      terms.push_back(summed(member));
      weights.push_back(weight);
    }
  }
  for (const Var& v : terms)
    if (!v.value().all_finite()) throw TrainingError("non-finite loss term");
  return ad::weighted_sum(terms, weights);
}

}  // namespace obj

}  // namespace gmt
