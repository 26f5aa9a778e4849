#include "gmt/memory_cell.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "gmt/memory_maintenance.hpp"

namespace gmt {

namespace {

struct Bound {
  Var C, ln_c_gain, ln_c_bias, gate, momentum, E, W_Q, W_K, ln_disp_gain, ln_disp_bias;
};

Bound bind_params(Tape& t, MemoryCell& c) {
  return {t.param(c.bank.C),        t.param(c.bank.ln_c.gain), t.param(c.bank.ln_c.bias), t.param(c.bank.gate),
          t.param(c.bank.momentum), t.param(c.edges.E),        t.param(c.nav.W_Q),         t.param(c.nav.W_K),
          t.param(c.nav.ln_disp.gain), t.param(c.nav.ln_disp.bias)};
}

Bound bind_constants(Tape& t, const MemoryCell& c) {
  return {t.constant(c.bank.C.value),        t.constant(c.bank.ln_c.gain.value), t.constant(c.bank.ln_c.bias.value),
          t.constant(c.bank.gate.value),     t.constant(c.bank.momentum.value),  t.constant(c.edges.E.value),
          t.constant(c.nav.W_Q.value),       t.constant(c.nav.W_K.value),        t.constant(c.nav.ln_disp.gain.value),
          t.constant(c.nav.ln_disp.bias.value)};
}

cell::Graph build(Var h, Var z, const Bound& b, const CellOptions& o) {
  cell::Graph g;
  g.z = z;
  g.C = b.C;
  g.C_tilde = ad::layer_norm(b.C, b.ln_c_gain, b.ln_c_bias);
  g.P = cell::transition_matrix(b.E);
  g.w_src = cell::source_routing(z, g.C_tilde, o.tau, o.eps_grav);
  std::tie(g.w_edge, g.w_tgt) = cell::target_selection(z, g.w_src, g.P, b.W_Q, b.W_K, g.C_tilde);
  cell::Readout r = cell::displacement_readout(g.w_src, g.w_tgt, g.C_tilde, b.gate, b.ln_disp_gain, b.ln_disp_bias);
  g.c_src = r.c_src;
  g.c_tgt = r.c_tgt;
  g.displacement = o.displacement_scale == 1.0 ? r.displacement : ad::scale(r.displacement, o.displacement_scale);
  g.x_next = ad::add(h, g.displacement);
  g.momentum = b.momentum;
  return g;
}

void check_dims(const MemoryCell& c) {
  const std::size_t F = c.bank.slots(), H = c.bank.dim();
  if (F < 2) throw ConfigurationError("memory cell needs at least 2 slots");
  if (!(c.edges.E.value.rows() == F && c.edges.E.value.cols() == F))
    throw ConfigurationError("edge matrix must be F×F, got " + c.edges.E.value.shape_string());
  if (c.nav.W_Q.value.rows() != H || c.nav.W_K.value.rows() != H || !c.nav.W_Q.value.same_shape(c.nav.W_K.value))
    throw ConfigurationError("navigation projections must be H×D");
}

void adapt(MemoryCell& c, const Matrix& x_next, const Matrix& w_src, const CellOptions& o) {
  write_back(c.bank, x_next, w_src, o.eps_count);
  update_usage(c.bank, w_src, o.rho);
}

}  // namespace

MemoryCell MemoryCell::create(const std::string& prefix, std::size_t F, std::size_t H, std::size_t D, Rng& rng,
                              const CellInit& init) {
  if (F < 2 || H < 1 || D < 1) throw ConfigurationError("memory cell dimensions must be F ≥ 2, H ≥ 1, D ≥ 1");
  MemoryCell c;
  Matrix C(F, H);
  for (std::size_t i = 0; i < F; ++i) {
    Matrix dir = random_direction(H, rng);
    std::copy(dir.values().begin(), dir.values().end(), C.row(i).begin());
  }
  c.bank.C = Parameter(prefix + ".C", std::move(C));
  c.bank.ln_c = LayerNormParams(prefix + ".ln_c", H);
  c.bank.gate = Parameter(prefix + ".gate", Matrix::scalar(init.gate), false);
  c.bank.momentum = Parameter(prefix + ".momentum", Matrix::scalar(init.momentum), false);
  c.bank.usage.assign(F, 1.0 / static_cast<Real>(F));
  c.bank.age.assign(F, 0);
  c.edges.E = Parameter(prefix + ".E", Matrix(F, F));
  c.nav.W_Q = Parameter(prefix + ".W_Q", gaussian(H, D, init.weight_std, rng));
  c.nav.W_K = Parameter(prefix + ".W_K", gaussian(H, D, init.weight_std, rng));
  c.nav.ln_disp = LayerNormParams(prefix + ".ln_disp", H);
  return c;
}

std::vector<Parameter*> MemoryCell::parameters() {
  return {&bank.C, &bank.ln_c.gain, &bank.ln_c.bias, &bank.gate, &bank.momentum, &edges.E,
          &nav.W_Q, &nav.W_K, &nav.ln_disp.gain, &nav.ln_disp.bias};
}

std::size_t MemoryCell::parameter_count() const {
  return bank.C.value.size() + bank.ln_c.gain.value.size() + bank.ln_c.bias.value.size() + bank.gate.value.size() +
         bank.momentum.value.size() + edges.E.value.size() + nav.W_Q.value.size() + nav.W_K.value.size() +
         nav.ln_disp.gain.value.size() + nav.ln_disp.bias.value.size();
}

namespace cell {

Var transition_matrix(Var E) {
  const std::size_t F = E.rows();
  if (F < 2) throw ConfigurationError("transition matrix needs F ≥ 2 (a single slot has no off-diagonal edge)");
  if (E.cols() != F) throw ConfigurationError("edge matrix must be square, got " + E.value().shape_string());
  Matrix mask(F, F);
  for (std::size_t i = 0; i < F; ++i) mask(i, i) = -std::numeric_limits<Real>::infinity();
  return ad::softmax_rows(ad::add_constant(E, mask));
}

Var source_routing(Var z, Var C_tilde, Real tau, Real eps_grav) {
  Var s = ad::matmul_nt(ad::row_normalize(z), ad::row_normalize(C_tilde));
  return ad::softmax_rows(ad::inverse_distance_logits(s, tau, eps_grav));
}

std::pair<Var, Var> target_selection(Var z, Var w_src, Var P, Var W_Q, Var W_K, Var C_tilde) {
  Var w_edge = ad::matmul(w_src, P);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(W_Q.cols()));
  Var a = ad::scale(ad::matmul_nt(ad::matmul(z, W_Q), ad::matmul(C_tilde, W_K)), scale);
  return {w_edge, ad::softmax_rows(ad::add(w_edge, a))};
}

Readout displacement_readout(Var w_src, Var w_tgt, Var C_tilde, Var gate, Var ln_gain, Var ln_bias) {
  Readout r;
  r.c_src = ad::matmul(w_src, C_tilde);
  r.c_tgt = ad::matmul(w_tgt, C_tilde);
  Var delta = ad::layer_norm(ad::sub(r.c_tgt, r.c_src), ln_gain, ln_bias);
  r.displacement = ad::scale_by(delta, ad::sigmoid(gate));
  return r;
}

RoutingResult Graph::trace() const {
  return {w_src.value(), w_edge.value(), w_tgt.value(), c_src.value(), c_tgt.value(), displacement.value()};
}

Graph forward(Tape& tape, Var h, LayerNormParams& ln2, MemoryCell& c, const CellOptions& options) {
  check_dims(c);
  Var z = ad::layer_norm(h, tape.param(ln2.gain), tape.param(ln2.bias));
  Graph g = build(h, z, bind_params(tape, c), options);
  if (options.adaptive) adapt(c, g.x_next.value(), g.w_src.value(), options);
  return g;
}

}  // namespace cell

Matrix transition_matrix(const EdgeGraph& edges) {
  Tape t;
  return cell::transition_matrix(t.constant(edges.E.value)).value();
}

Matrix normalized_centroids(const CentroidBank& bank) {
  return layer_norm(bank.C.value, bank.ln_c.gain.value, bank.ln_c.bias.value);
}

Matrix source_routing(const Matrix& z, const CentroidBank& bank, Real tau, Real eps_grav) {
  Tape t;
  return cell::source_routing(t.constant(z), t.constant(normalized_centroids(bank)), tau, eps_grav).value();
}

std::pair<Matrix, Matrix> target_selection(const Matrix& z, const Matrix& w_src, const Matrix& P,
                                           const NavigationParams& nav, const CentroidBank& bank) {
  Tape t;
  auto [w_edge, w_tgt] = cell::target_selection(t.constant(z), t.constant(w_src), t.constant(P), t.constant(nav.W_Q.value),
                                                t.constant(nav.W_K.value), t.constant(normalized_centroids(bank)));
  return {w_edge.value(), w_tgt.value()};
}

Matrix displacement_readout(const Matrix& w_src, const Matrix& w_tgt, const CentroidBank& bank,
                            const NavigationParams& nav) {
  Tape t;
  return cell::displacement_readout(t.constant(w_src), t.constant(w_tgt), t.constant(normalized_centroids(bank)),
                                    t.constant(bank.gate.value), t.constant(nav.ln_disp.gain.value),
                                    t.constant(nav.ln_disp.bias.value))
      .displacement.value();
}

CellForward memory_cell_forward(const Matrix& h, const LayerNormParams& ln2, MemoryCell& c, const CellOptions& options) {
  check_dims(c);
  Tape t;
  Var hv = t.constant(h);
  Var z = ad::layer_norm(hv, t.constant(ln2.gain.value), t.constant(ln2.bias.value));
  cell::Graph g = build(hv, z, bind_constants(t, c), options);
  CellForward out{g.x_next.value(), g.trace()};
  if (options.adaptive) adapt(c, out.x_next, out.trace.w_src, options);
  return out;
}

}  // namespace gmt
