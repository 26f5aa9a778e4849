#include "gmt/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "gmt/diagnostics.hpp"

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

bool has_memory(const Model& m) { return m.config.block_kind == BlockKind::graph_memory; }

}  // namespace

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigurationError("peak_lr must be positive");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) throw ConfigurationError("min_lr_ratio must lie in [0, 1]");
  if (!(weight_decay >= 0.0)) throw ConfigurationError("weight_decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigurationError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigurationError("adam_eps must be positive");
  if (total_steps > 0 && warmup_steps > total_steps) throw ConfigurationError("warmup_steps exceeds total_steps");
  if (total_steps == 0 && epochs == 0) throw ConfigurationError("need total_steps or epochs");
  if (B == 0 || A == 0) throw ConfigurationError("B and A must be at least 1");
  if (!(clip_norm > 0.0)) throw ConfigurationError("clip_norm must be positive");
  if (eval_batches_cap == 0) throw ConfigurationError("eval_batches_cap must be at least 1");
}

json TrainConfig::to_json() const {
  return {{"peak_lr", peak_lr},
          {"min_lr_ratio", min_lr_ratio},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"warmup_steps", warmup_steps},
          {"total_steps", total_steps},
          {"B", B},
          {"A", A},
          {"clip_norm", clip_norm},
          {"epochs", epochs},
          {"seed", seed},
          {"eval_every", eval_every},
          {"eval_batches_cap", eval_batches_cap},
          {"adaptive_eval", adaptive_eval},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"peak_lr", "min_lr_ratio", "weight_decay", "beta1", "beta2", "adam_eps", "warmup_steps", "total_steps", "B", "A",
                  "clip_norm", "epochs", "seed", "eval_every", "eval_batches_cap", "adaptive_eval", "checkpoint_every"},
                 "train");
  TrainConfig c;
  read(j, "peak_lr", c.peak_lr);
  read(j, "min_lr_ratio", c.min_lr_ratio);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "total_steps", c.total_steps);
  read(j, "B", c.B);
  read(j, "A", c.A);
  read(j, "clip_norm", c.clip_norm);
  read(j, "epochs", c.epochs);
  read(j, "seed", c.seed);
  read(j, "eval_every", c.eval_every);
  read(j, "eval_batches_cap", c.eval_batches_cap);
  read(j, "adaptive_eval", c.adaptive_eval);
  read(j, "checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

json RunConfig::to_json() const { return {{"model", model.to_json()}, {"train", train.to_json()}}; }

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"model", "train"}, "config");
  RunConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read config " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigurationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

Real temperature_schedule(std::uint64_t s, std::uint64_t S, Real tau_max, Real tau_min) {
  if (S == 0) throw ConfigurationError("temperature schedule needs S ≥ 1");
  const Real p = std::min(static_cast<Real>(s) / static_cast<Real>(S), 1.0);
  if (p == 1.0) return tau_min;
  const Real rho = std::log(1.0 + (std::numbers::e - 1.0) * p);
  return tau_max * std::pow(tau_min / tau_max, rho);
}

Real lr_schedule(std::uint64_t s, std::uint64_t warmup, std::uint64_t S, Real peak, Real min_ratio) {
  if (s < warmup) return peak * static_cast<Real>(s) / static_cast<Real>(warmup);
  const Real floor = peak * min_ratio;
  if (s >= S) return floor;
  const Real progress = static_cast<Real>(s - warmup) / static_cast<Real>(S - warmup);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Real perplexity(Real loss) { return std::exp(std::min(loss, 20.0)); }

Objective build_objective(Tape& tape, Model& model, const Batch& batch, const ForwardOptions& options,
                          std::span<const Matrix> tracking_targets) {
  if (batch.inputs.size() != batch.targets.size()) throw ConfigurationError("batch inputs and targets differ in size");
  Objective o;
  o.graph = net::forward(tape, model, batch.inputs, batch.seq_len, options);
  o.task = ad::cross_entropy(o.graph.logits, batch.targets);
  std::size_t k = 0;
  for (const net::BlockGraph& b : o.graph.blocks) {
    if (!b.cell) continue;
    const Matrix* target = nullptr;
    if (!tracking_targets.empty()) {
      if (k >= tracking_targets.size()) throw ConfigurationError("one tracking target per memory block");
      target = &tracking_targets[k++];
    }
    o.terms.push_back(obj::block_terms(*b.cell, model.config.loss, target));
  }
  if (!tracking_targets.empty() && k != tracking_targets.size())
    throw ConfigurationError("one tracking target per memory block");
  o.total = obj::total_loss(o.task, o.terms, model.config.loss);
  return o;
}

std::vector<Matrix> tracking_targets(const Objective& objective) {
  std::vector<Matrix> out;
  for (const net::BlockGraph& b : objective.graph.blocks)
    if (b.cell) out.push_back(b.x_next.value());
  return out;
}

void adamw_update(std::span<Parameter* const> params, AdamState& state, const TrainConfig& c, Real lr) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (Parameter* p : params) {
      state.m.emplace_back(p->value.rows(), p->value.cols());
      state.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  ++state.t;
  const Real bc1 = 1.0 - std::pow(c.beta1, static_cast<Real>(state.t));
  const Real bc2 = 1.0 - std::pow(c.beta2, static_cast<Real>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Matrix& m = state.m[k];
    Matrix& v = state.v[k];
    if (!m.same_shape(p.value)) throw ConfigurationError("optimizer state does not match parameter " + p.name);
    if (p.decay) p.value *= 1.0 - lr * c.weight_decay;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const Real g = p.grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      p.value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
    }
  }
}

Real clip_gradients(std::span<Parameter* const> params, Real clip_norm) {
  Real sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.eigen().squaredNorm();
  const Real norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
  if (norm > clip_norm) {
    const Real s = clip_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

TrainingState::TrainingState(Model m, TrainConfig t) : model(std::move(m)), train(std::move(t)) {
  train.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(train.seed), static_cast<std::uint32_t>(train.seed >> 32), 0x7a11u};
  rng.seed(seq);
}

json StepReport::to_json() const {
  return {{"step", step},   {"lr", lr},         {"tau", tau},   {"lm_loss", lm_loss},
          {"track", track}, {"ortho", ortho},   {"cluster", cluster}, {"edge", edge},
          {"contrast", contrast}, {"grad_norm", grad_norm}};
}

StepReport train_step(TrainingState& state, std::span<const Batch> micro_batches) {
  const TrainConfig& tc = state.train;
  const ModelConfig& mc = state.model.config;
  if (tc.total_steps == 0) throw ConfigurationError("train_step needs a resolved total_steps");
  if (micro_batches.empty()) throw ConfigurationError("train_step needs at least one micro-batch");

  StepReport r;
  r.step = state.step;
  r.lr = lr_schedule(state.step, tc.warmup_steps, tc.total_steps, tc.peak_lr, tc.min_lr_ratio);
  r.tau = temperature_schedule(state.step, tc.total_steps, mc.tau_max, mc.tau_min);

  std::vector<Parameter*> params = state.model.parameters();
  for (Parameter* p : params) p->zero_grad();

  ForwardOptions opt;
  opt.training = true;
  opt.adaptive = has_memory(state.model);
  opt.tau = r.tau;
  opt.dropout_rng = &state.rng;

  std::vector<Matrix> pools;
  const Real inv = 1.0 / static_cast<Real>(micro_batches.size());
  for (const Batch& batch : micro_batches) {
    Tape tape;
    Objective o = build_objective(tape, state.model, batch, opt);
    tape.backward(o.total);
    r.lm_loss += inv * o.task.value().item();
    for (const obj::AuxTerms& t : o.terms) {
      r.track += inv * t.track.value().item();
      r.ortho += inv * t.ortho.value().item();
      r.cluster += inv * t.cluster.value().item();
      r.edge += inv * t.edge.value().item();
      r.contrast += inv * t.contrast.value().item();
    }
    pools.clear();
    for (const net::BlockGraph& b : o.graph.blocks)
      if (b.cell) pools.push_back(b.x_next.value());
  }
  for (Parameter* p : params) {
    p->grad *= inv;
    if (!p->grad.all_finite()) throw TrainingError("non-finite gradient in " + p->name);
  }
  r.grad_norm = clip_gradients(params, tc.clip_norm);
  adamw_update(params, state.adam, tc, r.lr);
  ++state.step;

  const MaintenanceConfig& maint = mc.maintenance;
  if (opt.adaptive && maint.k_maint > 0 && state.step % maint.k_maint == 0) {
    std::size_t k = 0;
    for (std::size_t l = 0; l < state.model.blocks.size(); ++l) {
      Block& b = state.model.blocks[l];
      if (!b.cell) continue;
      r.maintenance.push_back(maintenance_step(b.cell->bank, pools[k++], maint, state.rng, state.step, l));
    }
  }
  return r;
}

ValidationResult validate(Model& model, const TokenWindowStream& val, std::size_t B, std::size_t cap, bool adaptive,
                          Real tau) {
  const std::size_t T = model.config.T_max;
  const std::size_t n = window_count(val, T);
  if (n == 0) throw ConfigurationError("validation stream has no complete window");
  if (B == 0 || cap == 0) throw ConfigurationError("validation needs B ≥ 1 and cap ≥ 1");
  const std::size_t batches = std::min(cap, (n + B - 1) / B);
  ForwardOptions opt;
  opt.adaptive = adaptive && has_memory(model);
  opt.tau = tau;
  ValidationResult r;
  for (std::size_t k = 0; k < batches; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = k * B; i < std::min(n, (k + 1) * B); ++i) idx.push_back(i);
    Batch batch = make_batch(val, idx, T);
    Tape tape;
    net::ModelGraph g = net::forward(tape, model, batch.inputs, T, opt);
    r.val_loss += cross_entropy(g.logits.value(), batch.targets);
  }
  r.batches = batches;
  r.val_loss /= static_cast<Real>(batches);
  r.ppl = perplexity(r.val_loss);
  return r;
}

bool update_best(Real& best, Real val_loss) {
  if (val_loss < best) {
    best = val_loss;
    return true;
  }
  return false;
}

json EvalRecord::to_json() const {
  return {{"step", step},
          {"val_loss", val_loss},
          {"ppl", ppl},
          {"n_eff_mean", n_eff_mean},
          {"n_eff_min", n_eff_min},
          {"dead_total", dead_total},
          {"mean_cos_sim", mean_cos_sim},
          {"edge_entropy_mean", edge_entropy_mean},
          {"max_edge_mass", max_edge_mass},
          {"edge_row_sim", edge_row_sim}};
}

EvalRecord evaluate(TrainingState& state, const TokenWindowStream& val) {
  const ModelConfig& mc = state.model.config;
  const std::uint64_t S = std::max<std::uint64_t>(state.train.total_steps, 1);
  const Real tau = temperature_schedule(state.step, S, mc.tau_max, mc.tau_min);
  ValidationResult v =
      validate(state.model, val, state.train.B, state.train.eval_batches_cap, state.train.adaptive_eval, tau);
  MemoryHealth h = memory_health(state.model);
  return {state.step,   v.val_loss, v.ppl, h.n_eff_mean, h.n_eff_min, h.dead_total, h.mean_cos_sim,
          h.edge_entropy_mean, h.max_edge_mass, h.edge_row_sim};
}

std::uint64_t updates_per_epoch(std::size_t windows, const TrainConfig& c) { return windows / (c.B * c.A); }

std::vector<std::vector<std::size_t>> update_windows(std::size_t windows, const TrainConfig& c, std::uint64_t s) {
  const std::uint64_t upe = updates_per_epoch(windows, c);
  if (upe == 0) throw ConfigurationError("training stream has fewer than B·A windows");
  const std::vector<std::size_t> order = epoch_order(windows, c.seed, s / upe);
  std::size_t pos = static_cast<std::size_t>(s % upe) * c.B * c.A;
  std::vector<std::vector<std::size_t>> out(c.A);
  for (auto& micro : out)
    for (std::size_t b = 0; b < c.B; ++b) micro.push_back(order[pos++]);
  return out;
}

RunSummary run_training(TrainingState& state, const TokenWindowStream& train_stream, const TokenWindowStream& val,
                        const RunOptions& options) {
  namespace fs = std::filesystem;
  const std::size_t T = state.model.config.T_max;
  const std::size_t n = window_count(train_stream, T);
  const std::uint64_t upe = updates_per_epoch(n, state.train);
  if (upe == 0) throw ConfigurationError("training stream has fewer than B·A windows");
  if (state.train.total_steps == 0) state.train.total_steps = state.train.epochs * upe;
  if (state.train.warmup_steps > state.train.total_steps) throw ConfigurationError("warmup_steps exceeds total_steps");

  if (options.resume) restore(state, checkpoint_load(*options.resume));

  const bool files = !options.out_dir.empty();
  std::ofstream log;
  if (files) {
    fs::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
  }
  RunSummary summary;
  StepReport last;
  try {
    while (state.step < state.train.total_steps) {
      std::vector<Batch> micro;
      for (const auto& idx : update_windows(n, state.train, state.step)) micro.push_back(make_batch(train_stream, idx, T));
      last = train_step(state, micro);
      if (files) {
        log << last.to_json().dump() << "\n";
        for (const MaintenanceReport& m : last.maintenance) log << m.to_json() << "\n";
      }
      if (options.on_step) options.on_step(last);

      const bool at_end = state.step == state.train.total_steps;
      if ((state.train.eval_every > 0 && state.step % state.train.eval_every == 0) || at_end) {
        EvalRecord e = evaluate(state, val);
        summary.evals.push_back(e);
        if (files) log << e.to_json().dump() << "\n" << std::flush;
        if (options.on_eval) options.on_eval(e);
        if (update_best(state.best_val, e.val_loss) && files) checkpoint_save(state, options.out_dir / "best.ckpt");
      }
      if (files && state.train.checkpoint_every > 0 && state.step % state.train.checkpoint_every == 0)
        checkpoint_save(state, options.out_dir / "last.ckpt");
    }
  } catch (const std::runtime_error& err) {
    if (files) {
      json dump = {{"error", err.what()},
                   {"step", state.step},
                   {"last_step", last.to_json()},
                   {"config", RunConfig{state.model.config, state.train}.to_json()}};
      std::ofstream(options.out_dir / "failure.json") << dump.dump(2) << "\n";
    }
    throw;
  }
  if (files) checkpoint_save(state, options.out_dir / "last.ckpt");
  summary.steps = state.step;
  summary.best_val = state.best_val;
  return summary;
}

GradCheckResult objective_grad_check(Model& model, const Batch& batch, const ForwardOptions& options, Real h) {
  Tape ref;
  const std::vector<Matrix> targets = tracking_targets(build_objective(ref, model, batch, options));
  auto f = [&](Tape& t) { return build_objective(t, model, batch, options, targets).total; };
  std::vector<Parameter*> ps = model.parameters();
  return grad_check(f, ps, h);
}

GradCheckResult config_grad_check(const ModelConfig& config, std::uint64_t seed) {
  ModelConfig c = config;
  c.p_embed = c.p_attn = 0.0;
  c.validate();
  if (parameter_count(c).total > 200000)
    throw ConfigurationError("gradcheck is meant for toy configurations (at most 200000 parameters)");
  Model model = Model::create(c, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<Real> nd(0.0, 0.3);
  for (Parameter* p : model.parameters()) {
    if (p->name.ends_with(".gate") || p->name.ends_with(".momentum")) continue;
    for (Real& v : p->value.values()) v += nd(rng);
  }
  Batch batch;
  batch.seq_len = c.T_max;
  std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(c.V - 1));
  for (std::size_t i = 0; i < 2 * c.T_max; ++i) {
    batch.inputs.push_back(tok(rng));
    batch.targets.push_back(tok(rng));
  }
  ForwardOptions opt;
  opt.tau = 0.5;
  return objective_grad_check(model, batch, opt);
}

}  // namespace gmt
