#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmt/corpus.hpp"
#include "gmt/grad_check.hpp"
#include "gmt/memory_maintenance.hpp"
#include "gmt/model.hpp"
#include "json.hpp"

namespace gmt {

struct TrainConfig {
  Real peak_lr = 3e-4;
  Real min_lr_ratio = 0.0;  // cosine ends at peak_lr * min_lr_ratio
  Real weight_decay = 0.1;
  Real beta1 = 0.9;
  Real beta2 = 0.95;
  Real adam_eps = 1e-8;
  std::uint64_t warmup_steps = 50;
  std::uint64_t total_steps = 2000;  // 0: epochs × full updates per epoch
  std::size_t B = 8;
  std::size_t A = 2;
  Real clip_norm = 1.0;
  std::uint64_t epochs = 1;
  std::uint64_t seed = 1234;
  std::uint64_t eval_every = 100;
  std::size_t eval_batches_cap = 512;
  bool adaptive_eval = true;
  std::uint64_t checkpoint_every = 0;  // 0: only best and final

  void validate() const;
  /// Tokens consumed by one optimizer update at sequence length T.
  std::size_t tokens_per_update(std::size_t T) const { return B * A * T; }

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// {"model": {...}, "train": {...}}
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// tau_max·(tau_min/tau_max)^ρ with ρ = ln(1 + (e − 1)·min(s/S, 1)).
Real temperature_schedule(std::uint64_t s, std::uint64_t S, Real tau_max, Real tau_min);

/// Linear warmup from 0 to peak, then cosine down to peak·min_ratio at S.
Real lr_schedule(std::uint64_t s, std::uint64_t warmup, std::uint64_t S, Real peak, Real min_ratio = 0.0);

/// exp(min(loss, 20)).
Real perplexity(Real loss);

struct Objective {
  Var total;
  Var task;
  std::vector<obj::AuxTerms> terms;  // one per graph-memory block
  net::ModelGraph graph;
};

/// Next-token cross-entropy plus the weighted auxiliary memory losses. `tracking_targets`, one
/// per graph-memory block, pins the detached tracking targets (finite-difference checks).
Objective build_objective(Tape& tape, Model& model, const Batch& batch, const ForwardOptions& options,
                          std::span<const Matrix> tracking_targets = {});

/// The detached x_next of each graph-memory block.
std::vector<Matrix> tracking_targets(const Objective& objective);

/// Central differences on the full objective over every parameter, tracking targets pinned at
/// the current point.
GradCheckResult objective_grad_check(Model& model, const Batch& batch, const ForwardOptions& options, Real h = 1e-5);

/// The toy-model check: dropout off, weights perturbed by N(0, 0.3) (gate and momentum kept),
/// two random sequences of length T_max, tau 0.5.
GradCheckResult config_grad_check(const ModelConfig& config, std::uint64_t seed);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;
};

/// Gradients in Parameter::grad; decoupled decay only where Parameter::decay is set.
void adamw_update(std::span<Parameter* const> params, AdamState& state, const TrainConfig& config, Real lr);

/// Global L2 norm of the gradients; rescales them to clip_norm when larger.
Real clip_gradients(std::span<Parameter* const> params, Real clip_norm);

struct TrainingState {
  TrainingState(Model model, TrainConfig train);

  Model model;
  TrainConfig train;
  AdamState adam;
  Rng rng;
  std::uint64_t step = 0;  // completed optimizer updates
  Real best_val = std::numeric_limits<Real>::infinity();
};

struct StepReport {
  std::uint64_t step = 0;  // index of the update that just finished, 0-based
  Real lr = 0.0;
  Real tau = 0.0;
  Real lm_loss = 0.0;
  Real track = 0.0;
  Real ortho = 0.0;
  Real cluster = 0.0;
  Real edge = 0.0;
  Real contrast = 0.0;
  Real grad_norm = 0.0;
  std::vector<MaintenanceReport> maintenance;

  nlohmann::json to_json() const;
};

/// One optimizer update over the given micro-batches (gradients averaged). Maintenance runs
/// afterwards when the completed update count is a multiple of k_maint.
StepReport train_step(TrainingState& state, std::span<const Batch> micro_batches);

struct ValidationResult {
  Real val_loss = 0.0;
  Real ppl = 0.0;
  std::size_t batches = 0;
};

/// Mean next-token loss over the first min(cap, available) validation batches, in order.
ValidationResult validate(Model& model, const TokenWindowStream& val, std::size_t B, std::size_t cap, bool adaptive,
                          Real tau);

/// Strict improvement replaces the stored best.
bool update_best(Real& best, Real val_loss);

// Checkpoint file: "GMTCKPT1", u64 LE metadata length, metadata JSON, u64 tensor count,
// tensors (u32 name length, name, u8 dtype, u32 rank, u64 dims, LE payload), CRC32.
struct Checkpoint {
  nlohmann::json config;  // RunConfig::to_json()
  std::string config_hash;
  std::uint64_t step = 0;
  std::string rng;
  Real best_val = std::numeric_limits<Real>::infinity();
  std::uint64_t adam_t = 0;
  std::vector<std::pair<std::string, Matrix>> tensors;
  std::vector<std::pair<std::string, std::vector<std::uint64_t>>> counters;
};

std::string config_hash(const ModelConfig& config);

Checkpoint capture(const TrainingState& state);
void checkpoint_save(const TrainingState& state, const std::filesystem::path& path);
/// Throws LoadError on bad magic, truncation, checksum or hash mismatch.
Checkpoint checkpoint_load(const std::filesystem::path& path);
/// All-or-nothing: every tensor is checked before any state changes.
void restore(TrainingState& state, const Checkpoint& ckpt);
TrainingState state_from_checkpoint(const Checkpoint& ckpt);

struct EvalRecord {
  std::uint64_t step = 0;
  Real val_loss = 0.0;
  Real ppl = 0.0;
  Real n_eff_mean = 0.0;
  Real n_eff_min = 0.0;
  std::size_t dead_total = 0;
  Real mean_cos_sim = 0.0;
  Real edge_entropy_mean = 0.0;
  Real max_edge_mass = 0.0;
  Real edge_row_sim = 0.0;

  nlohmann::json to_json() const;
};

EvalRecord evaluate(TrainingState& state, const TokenWindowStream& val);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no files
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepReport&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

struct RunSummary {
  std::uint64_t steps = 0;
  Real best_val = std::numeric_limits<Real>::infinity();
  std::vector<EvalRecord> evals;
};

/// Optimizer updates per epoch, dropping a final incomplete accumulation window.
std::uint64_t updates_per_epoch(std::size_t windows, const TrainConfig& config);

/// Windows consumed by update s: epoch-permuted order, cycling through epochs.
std::vector<std::vector<std::size_t>> update_windows(std::size_t windows, const TrainConfig& config, std::uint64_t s);

/// Trains until total_steps, writing train_log.jsonl, best.ckpt and last.ckpt to out_dir.
RunSummary run_training(TrainingState& state, const TokenWindowStream& train_stream, const TokenWindowStream& val,
                        const RunOptions& options);

}  // namespace gmt
