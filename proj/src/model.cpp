#include "gmt/model.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace gmt {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigurationError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigurationError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigurationError(std::string("bad value for '") + key + "': " + e.what());
  }
}

std::vector<Real> dropout_mask(std::size_t n, Real p, Rng& rng) {
  std::vector<Real> mask(n);
  std::bernoulli_distribution keep(1.0 - p);
  const Real scale = 1.0 / (1.0 - p);
  for (Real& m : mask) m = keep(rng) ? scale : 0.0;
  return mask;
}

bool dropout_active(Real p, const ForwardOptions& o) { return o.training && p > 0.0; }

Rng& require_rng(const ForwardOptions& o) {
  if (!o.dropout_rng) throw ConfigurationError("training-mode dropout needs a random generator");
  return *o.dropout_rng;
}

CellOptions cell_options(const ModelConfig& c, const ForwardOptions& o) {
  CellOptions co;
  co.tau = o.tau;
  co.eps_grav = c.eps_grav;
  co.adaptive = o.adaptive;
  co.displacement_scale = o.displacement_scale;
  co.rho = c.maintenance.rho;
  co.eps_count = c.maintenance.eps_count;
  return co;
}

}  // namespace

std::string to_string(BlockKind kind) { return kind == BlockKind::graph_memory ? "graph_memory" : "dense_ffn"; }

BlockKind block_kind_from_string(const std::string& name) {
  if (name == "graph_memory") return BlockKind::graph_memory;
  if (name == "dense_ffn") return BlockKind::dense_ffn;
  throw ConfigurationError("unknown block kind '" + name + "'");
}

ModelConfig ModelConfig::paper_base() {
  ModelConfig c;
  c.L = 16;
  c.H = 768;
  c.N_h = 12;
  c.D = 128;
  c.F = 128;
  c.T_max = 1024;
  c.V = 50257;
  c.loss.N_target = 32.0;
  return c;
}

ModelConfig ModelConfig::paper_baseline() {
  ModelConfig c = paper_base();
  c.block_kind = BlockKind::dense_ffn;
  c.H_ff = 1050;
  return c;
}

void ModelConfig::validate() const {
  if (H == 0 || N_h == 0 || T_max == 0 || V == 0) throw ConfigurationError("model dimensions must be at least 1");
  if (H % N_h != 0) throw ConfigurationError("H must be divisible by N_h");
  if (!(p_embed >= 0.0 && p_embed < 1.0) || !(p_attn >= 0.0 && p_attn < 1.0))
    throw ConfigurationError("dropout rates must lie in [0, 1)");
  if (!(tau_max > 0.0 && tau_min > 0.0)) throw ConfigurationError("routing temperatures must be positive");
  if (!(eps_grav > 0.0)) throw ConfigurationError("eps_grav must be positive");
  if (block_kind == BlockKind::graph_memory) {
    if (F < 2 || D == 0) throw ConfigurationError("graph memory blocks need F ≥ 2 and D ≥ 1");
    loss.validate(F);
    maintenance.validate(F);
  } else if (H_ff == 0) {
    throw ConfigurationError("dense_ffn blocks need H_ff ≥ 1");
  }
}

json ModelConfig::to_json() const {
  return {{"L", L},
          {"H", H},
          {"N_h", N_h},
          {"D", D},
          {"F", F},
          {"T_max", T_max},
          {"V", V},
          {"p_embed", p_embed},
          {"p_attn", p_attn},
          {"tau_max", tau_max},
          {"tau_min", tau_min},
          {"eps_grav", eps_grav},
          {"block_kind", to_string(block_kind)},
          {"H_ff", H_ff},
          {"init_std", init_std},
          {"loss",
           {{"lambda_track", loss.lambda_track},
            {"beta_ortho", loss.beta_ortho},
            {"lambda_cluster", loss.lambda_cluster},
            {"lambda_edge", loss.lambda_edge},
            {"lambda_contrast", loss.lambda_contrast},
            {"N_target", loss.N_target},
            {"H_target", loss.H_target},
            {"eps_log", loss.eps_log}}},
          {"maintenance",
           {{"rho", maintenance.rho},
            {"delta_dead", maintenance.delta_dead},
            {"tau_merge", maintenance.tau_merge},
            {"a_cool", maintenance.a_cool},
            {"k_maint", maintenance.k_maint},
            {"eps_count", maintenance.eps_count}}}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"L", "H", "N_h", "D", "F", "T_max", "V", "p_embed", "p_attn", "tau_max", "tau_min", "eps_grav",
                  "block_kind", "H_ff", "init_std", "loss", "maintenance"},
                 "model config");
  ModelConfig c;
  read(j, "L", c.L);
  read(j, "H", c.H);
  read(j, "N_h", c.N_h);
  read(j, "D", c.D);
  read(j, "F", c.F);
  read(j, "T_max", c.T_max);
  read(j, "V", c.V);
  read(j, "p_embed", c.p_embed);
  read(j, "p_attn", c.p_attn);
  read(j, "tau_max", c.tau_max);
  read(j, "tau_min", c.tau_min);
  read(j, "eps_grav", c.eps_grav);
  read(j, "H_ff", c.H_ff);
  read(j, "init_std", c.init_std);
  if (j.contains("block_kind")) c.block_kind = block_kind_from_string(j.at("block_kind").get<std::string>());
  c.loss.N_target = static_cast<Real>(c.F) / 4.0;
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    reject_unknown(l,
                   {"lambda_track", "beta_ortho", "lambda_cluster", "lambda_edge", "lambda_contrast", "N_target",
                    "H_target", "eps_log"},
                   "loss config");
    read(l, "lambda_track", c.loss.lambda_track);
    read(l, "beta_ortho", c.loss.beta_ortho);
    read(l, "lambda_cluster", c.loss.lambda_cluster);
    read(l, "lambda_edge", c.loss.lambda_edge);
    read(l, "lambda_contrast", c.loss.lambda_contrast);
    read(l, "N_target", c.loss.N_target);
    read(l, "H_target", c.loss.H_target);
    read(l, "eps_log", c.loss.eps_log);
  }
  if (j.contains("maintenance")) {
    const json& m = j.at("maintenance");
    reject_unknown(m, {"rho", "delta_dead", "tau_merge", "a_cool", "k_maint", "eps_count"}, "maintenance config");
    read(m, "rho", c.maintenance.rho);
    read(m, "delta_dead", c.maintenance.delta_dead);
    read(m, "tau_merge", c.maintenance.tau_merge);
    read(m, "a_cool", c.maintenance.a_cool);
    read(m, "k_maint", c.maintenance.k_maint);
    read(m, "eps_count", c.maintenance.eps_count);
  }
  c.validate();
  return c;
}

std::vector<Parameter*> Block::parameters() {
  std::vector<Parameter*> out{&ln1.gain, &ln1.bias, &W_qkv, &W_o, &ln2.gain, &ln2.bias};
  if (cell) {
    for (Parameter* p : cell->parameters()) out.push_back(p);
  } else {
    out.push_back(&W1);
    out.push_back(&W2);
  }
  return out;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config = config;
  const std::size_t H = config.H;
  const Real sd = config.init_std;
  m.tok_emb = Parameter("tok_emb", gaussian(config.V, H, sd, rng), false);
  m.pos_emb = Parameter("pos_emb", gaussian(config.T_max, H, sd, rng), false);
  m.blocks.resize(config.L);
  for (std::size_t l = 0; l < config.L; ++l) {
    Block& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l);
    b.ln1 = LayerNormParams(p + ".ln1", H);
    b.W_qkv = Parameter(p + ".W_qkv", gaussian(H, 3 * H, sd, rng));
    b.W_o = Parameter(p + ".W_o", gaussian(H, H, sd, rng));
    b.ln2 = LayerNormParams(p + ".ln2", H);
    if (config.block_kind == BlockKind::graph_memory) {
      b.cell = MemoryCell::create(p + ".cell", config.F, H, config.D, rng, {.weight_std = sd});
    } else {
      b.W1 = Parameter(p + ".W1", gaussian(H, config.H_ff, sd, rng));
      b.W2 = Parameter(p + ".W2", gaussian(config.H_ff, H, sd, rng));
    }
  }
  m.ln_f = LayerNormParams("ln_f", H);
  return m;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out{&tok_emb, &pos_emb};
  for (Block& b : blocks)
    for (Parameter* p : b.parameters()) out.push_back(p);
  out.push_back(&ln_f.gain);
  out.push_back(&ln_f.bias);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

ParameterBreakdown parameter_count(const ModelConfig& c) {
  ParameterBreakdown b;
  auto add = [&](std::string name, std::size_t n) {
    b.components.emplace_back(std::move(name), n);
    b.total += n;
  };
  const std::size_t H = c.H;
  add("token_embedding", c.V * H);
  add("position_embedding", c.T_max * H);
  for (std::size_t l = 0; l < c.L; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    add(p + "ln1", 2 * H);
    add(p + "attn.W_qkv", 3 * H * H);
    add(p + "attn.W_o", H * H);
    add(p + "ln2", 2 * H);
    if (c.block_kind == BlockKind::graph_memory) {
      add(p + "cell.C", c.F * H);
      add(p + "cell.E", c.F * c.F);
      add(p + "cell.W_Q", H * c.D);
      add(p + "cell.W_K", H * c.D);
      add(p + "cell.ln_c", 2 * H);
      add(p + "cell.ln_disp", 2 * H);
      add(p + "cell.gate", 1);
      add(p + "cell.momentum", 1);
    } else {
      add(p + "ffn.W1", H * c.H_ff);
      add(p + "ffn.W2", c.H_ff * H);
    }
  }
  add("ln_f", 2 * H);
  return b;
}

namespace net {

Var attention(Tape& tape, Var x, Block& block, std::size_t seq_len, std::size_t heads, Real p_attn, Rng* rng) {
  Var z = ad::layer_norm(x, tape.param(block.ln1.gain), tape.param(block.ln1.bias));
  Var qkv = ad::matmul(z, tape.param(block.W_qkv));
  std::vector<Real> mask;
  if (p_attn > 0.0 && rng) mask = dropout_mask((x.rows() / seq_len) * heads * seq_len * seq_len, p_attn, *rng);
  return ad::matmul(ad::causal_attention(qkv, seq_len, heads, std::move(mask)), tape.param(block.W_o));
}

BlockGraph block(Tape& tape, Var x, Block& b, const ModelConfig& config, std::size_t seq_len,
                 const ForwardOptions& options) {
  Rng* rng = dropout_active(config.p_attn, options) ? &require_rng(options) : nullptr;
  BlockGraph g;
  g.h = ad::add(x, attention(tape, x, b, seq_len, config.N_h, config.p_attn, rng));
  if (b.cell) {
    g.cell = cell::forward(tape, g.h, b.ln2, *b.cell, cell_options(config, options));
    g.x_next = g.cell->x_next;
  } else {
    Var z = ad::layer_norm(g.h, tape.param(b.ln2.gain), tape.param(b.ln2.bias));
    Var ffn = ad::matmul(ad::gelu(ad::matmul(z, tape.param(b.W1))), tape.param(b.W2));
    g.x_next = ad::add(g.h, ffn);
  }
  return g;
}

ModelGraph forward(Tape& tape, Model& model, std::span<const std::uint32_t> tokens, std::size_t seq_len,
                   const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  if (seq_len == 0 || seq_len > c.T_max)
    throw ConfigurationError("sequence length " + std::to_string(seq_len) + " outside [1, T_max=" +
                             std::to_string(c.T_max) + "]");
  if (tokens.empty() || tokens.size() % seq_len != 0)
    throw ConfigurationError("token count must be a positive multiple of the sequence length");
  std::vector<std::uint32_t> ids(tokens.begin(), tokens.end()), positions(tokens.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= c.V) throw DomainError("token id " + std::to_string(ids[i]) + " outside the vocabulary");
    positions[i] = static_cast<std::uint32_t>(i % seq_len);
  }
  Var wte = tape.param(model.tok_emb);
  Var x = ad::add(ad::gather_rows(wte, std::move(ids)), ad::gather_rows(tape.param(model.pos_emb), std::move(positions)));
  if (dropout_active(c.p_embed, options)) {
    const std::vector<Real> mask = dropout_mask(x.value().size(), c.p_embed, require_rng(options));
    x = ad::mul_constant(x, Matrix(x.rows(), x.cols(), mask));
  }
  ModelGraph g;
  for (Block& b : model.blocks) {
    g.blocks.push_back(block(tape, x, b, c, seq_len, options));
    x = g.blocks.back().x_next;
  }
  Var final_state = ad::layer_norm(x, tape.param(model.ln_f.gain), tape.param(model.ln_f.bias));
  g.logits = ad::matmul_nt(final_state, wte);
  return g;
}

}  // namespace net

Matrix attention_forward(const Matrix& x, Block& block, const ModelConfig& config) {
  if (x.rows() == 0 || x.rows() > config.T_max) throw ConfigurationError("sequence length outside [1, T_max]");
  Tape tape;
  return net::attention(tape, tape.constant(x), block, x.rows(), config.N_h, 0.0, nullptr).value();
}

BlockOutput block_forward(const Matrix& x, Block& block, const ModelConfig& config, const ForwardOptions& options) {
  if (x.rows() > config.T_max) throw ConfigurationError("sequence longer than T_max");
  Tape tape;
  net::BlockGraph g = net::block(tape, tape.constant(x), block, config, x.rows(), options);
  BlockOutput out{g.x_next.value(), std::nullopt};
  if (g.cell) out.trace = g.cell->trace();
  return out;
}

ModelOutput model_forward(Model& model, std::span<const std::uint32_t> tokens, const ForwardOptions& options) {
  Tape tape;
  net::ModelGraph g = net::forward(tape, model, tokens, tokens.size(), options);
  ModelOutput out{g.logits.value(), {}};
  for (const net::BlockGraph& b : g.blocks)
    if (b.cell) out.traces.push_back(b.cell->trace());
  return out;
}

}  // namespace gmt
