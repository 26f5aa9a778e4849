#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gmt/memory_cell.hpp"
#include "gmt/memory_maintenance.hpp"
#include "gmt/memory_objectives.hpp"
#include "gmt/random.hpp"
#include "json.hpp"

namespace gmt {

enum class BlockKind { graph_memory, dense_ffn };

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t L = 2;
  std::size_t H = 64;
  std::size_t N_h = 4;
  std::size_t D = 16;
  std::size_t F = 16;
  std::size_t T_max = 128;
  std::size_t V = 257;
  Real p_embed = 0.1;
  Real p_attn = 0.1;
  Real tau_max = 1.0;
  Real tau_min = 0.1;
  Real eps_grav = 0.01;
  LossWeights loss{.N_target = 4.0};
  MaintenanceConfig maintenance;
  BlockKind block_kind = BlockKind::graph_memory;
  std::size_t H_ff = 0;
  Real init_std = 0.02;

  /// The 16-block, 768-wide configuration with F = D = 128 and a 50,257-token vocabulary.
  static ModelConfig paper_base();
  /// paper_base() with dense FFN blocks of width 1050.
  static ModelConfig paper_baseline();

  std::size_t head_dim() const { return H / N_h; }
  void validate() const;

  nlohmann::json to_json() const;
  /// Keys absent from `j` keep their defaults; unknown keys throw ConfigurationError.
  /// A missing loss.N_target resolves to F/4.
  static ModelConfig from_json(const nlohmann::json& j);
};

struct Block {
  LayerNormParams ln1;
  Parameter W_qkv;  // H×3H
  Parameter W_o;    // H×H
  LayerNormParams ln2;
  std::optional<MemoryCell> cell;
  Parameter W1;  // H×H_ff, dense blocks only
  Parameter W2;  // H_ff×H

  BlockKind kind() const { return cell ? BlockKind::graph_memory : BlockKind::dense_ffn; }
  std::vector<Parameter*> parameters();
};

class Model {
 public:
  static Model create(const ModelConfig& config, std::uint64_t seed);

  ModelConfig config;
  Parameter tok_emb;  // V×H, also the output projection
  Parameter pos_emb;  // T_max×H
  std::vector<Block> blocks;
  LayerNormParams ln_f;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
};

struct ParameterBreakdown {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> components;
};

/// Closed-form trainable-parameter count; does not allocate the model.
ParameterBreakdown parameter_count(const ModelConfig& config);

struct ForwardOptions {
  bool training = false;  // dropout on
  bool adaptive = false;  // write-back and usage updates
  Real tau = 1.0;
  Real displacement_scale = 1.0;
  Rng* dropout_rng = nullptr;  // required when training with nonzero dropout
};

// Differentiable model pieces.
namespace net {

/// W_o · CausalAttention(LN₁(x) · W_qkv) for rows holding `x.rows() / seq_len` sequences.
Var attention(Tape& tape, Var x, Block& block, std::size_t seq_len, std::size_t heads, Real p_attn, Rng* rng);

struct BlockGraph {
  Var x_next;
  Var h;
  std::optional<cell::Graph> cell;
};

BlockGraph block(Tape& tape, Var x, Block& block, const ModelConfig& config, std::size_t seq_len,
                 const ForwardOptions& options);

struct ModelGraph {
  Var logits;  // (B·T)×V
  std::vector<BlockGraph> blocks;
};

/// `tokens` holds B sequences of length seq_len back to back.
ModelGraph forward(Tape& tape, Model& model, std::span<const std::uint32_t> tokens, std::size_t seq_len,
                   const ForwardOptions& options);

}  // namespace net

// Value-level evaluation.
/// One sequence, dropout off. Throws ConfigurationError when x has more than T_max rows.
Matrix attention_forward(const Matrix& x, Block& block, const ModelConfig& config);

struct BlockOutput {
  Matrix x_next;
  std::optional<RoutingResult> trace;
};
BlockOutput block_forward(const Matrix& x, Block& block, const ModelConfig& config, const ForwardOptions& options);

struct ModelOutput {
  Matrix logits;
  std::vector<RoutingResult> traces;  // one per graph-memory block
};
ModelOutput model_forward(Model& model, std::span<const std::uint32_t> tokens, const ForwardOptions& options = {});

}  // namespace gmt
