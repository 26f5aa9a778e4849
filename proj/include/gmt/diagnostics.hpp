#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gmt/corpus.hpp"
#include "gmt/model.hpp"
#include "json.hpp"

namespace gmt {

struct TraceRecord {
  std::size_t block = 0;
  std::size_t position = 0;
  std::uint32_t token_id = 0;
  std::string token_text;
  std::size_t source_slot = 0;
  std::size_t target_slot = 0;
  Real source_entropy = 0.0;
  Real target_entropy = 0.0;
  Real displacement_norm = 0.0;
  bool self_route = false;

  nlohmann::json to_json() const;
  static TraceRecord from_json(const nlohmann::json& j);
};

/// Entropy with 0·log 0 = 0, in [0, ln n].
Real entropy(std::span<const Real> p);

/// One evaluation forward with adaptive memory off; records for every graph-memory block and position.
std::vector<TraceRecord> trace_tokens(Model& model, std::span<const std::uint32_t> ids, const Tokenizer& tokenizer,
                                      Real tau = 1.0);
std::vector<TraceRecord> trace_text(Model& model, std::string_view text, const Tokenizer& tokenizer, Real tau = 1.0);

struct UsageSummary {
  Real n_eff = 0.0;
  Real gini = 0.0;
  Real top_share = 0.0;
  std::size_t unique = 0;  // slots with nonzero mass
};

/// Statistics of a nonnegative usage vector. Gini = Σ(2i − n − 1)x_i / (nΣx) over ascending x.
UsageSummary usage_summary(std::span<const Real> usage);

struct UtilizationStats {
  std::size_t block = 0;
  Real n_eff = 0.0;
  std::size_t unique_slots = 0;
  Real gini = 0.0;
  Real top_share = 0.0;
  std::size_t dead = 0;
  Real mean_cos_sim = 0.0;

  nlohmann::json to_json() const;
};

/// From the smoothed usage of each graph-memory block.
std::vector<UtilizationStats> utilization_stats(const Model& model);
/// From argmax source slots in a trace; dead count and cosine still come from the banks.
std::vector<UtilizationStats> utilization_stats(const Model& model, std::span<const TraceRecord> trace);

struct EdgeTable {
  std::size_t block = 0;
  std::vector<std::size_t> slots;  // selected rows by decreasing usage
  Matrix rows;                     // top_k × F rows of P
  std::vector<Real> row_entropy;
  std::vector<Real> max_mass;

  std::string to_csv() const;
};

EdgeTable edge_structure_export(const CentroidBank& bank, const EdgeGraph& edges, std::size_t top_k,
                                std::size_t block = 0);

struct MemoryHealth {
  Real n_eff_mean = 0.0;
  Real n_eff_min = 0.0;
  std::size_t dead_total = 0;
  Real mean_cos_sim = 0.0;
  Real edge_entropy_mean = 0.0;
  Real max_edge_mass = 0.0;
  Real edge_row_sim = 0.0;
};

/// Block means of the bank and edge statistics; zeros for a model without memory blocks.
MemoryHealth memory_health(const Model& model);

/// Mean next-token loss over the text's windows with displacements scaled by alpha.
Real text_loss(Model& model, std::span<const std::uint32_t> ids, Real tau = 1.0, Real alpha = 1.0);

struct SweepRow {
  Real alpha = 0.0;
  Real loss = 0.0;
};
std::vector<SweepRow> displacement_sweep(Model& model, std::span<const std::uint32_t> ids,
                                         std::span<const Real> alphas, Real tau = 1.0);

/// CRC32 over parameter values, usage and ages.
std::uint32_t state_checksum(const Model& model);

}  // namespace gmt
