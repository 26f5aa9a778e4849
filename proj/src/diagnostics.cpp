#include "gmt/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <zlib.h>

#include "gmt/memory_maintenance.hpp"
#include "gmt/memory_objectives.hpp"

namespace gmt {

namespace {

using nlohmann::json;

std::size_t argmax(std::span<const Real> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Real l2(std::span<const Real> v) {
  Real s = 0.0;
  for (Real x : v) s += x * x;
  return std::sqrt(s);
}

std::size_t dead_count(const CentroidBank& bank, Real delta_dead) {
  return static_cast<std::size_t>(
      std::count_if(bank.usage.begin(), bank.usage.end(), [&](Real u) { return u < delta_dead; }));
}

}  // namespace

json TraceRecord::to_json() const {
  return {{"block", block},
          {"position", position},
          {"token_id", token_id},
          {"token_text", token_text},
          {"source_slot", source_slot},
          {"target_slot", target_slot},
          {"source_entropy", source_entropy},
          {"target_entropy", target_entropy},
          {"displacement_norm", displacement_norm},
          {"self_route", self_route}};
}

TraceRecord TraceRecord::from_json(const json& j) {
  TraceRecord r;
  try {
    r.block = j.at("block").get<std::size_t>();
    r.position = j.at("position").get<std::size_t>();
    r.token_id = j.at("token_id").get<std::uint32_t>();
    r.token_text = j.at("token_text").get<std::string>();
    r.source_slot = j.at("source_slot").get<std::size_t>();
    r.target_slot = j.at("target_slot").get<std::size_t>();
    r.source_entropy = j.at("source_entropy").get<Real>();
    r.target_entropy = j.at("target_entropy").get<Real>();
    r.displacement_norm = j.at("displacement_norm").get<Real>();
    r.self_route = j.at("self_route").get<bool>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("bad trace record: ") + e.what());
  }
  return r;
}

Real entropy(std::span<const Real> p) {
  Real h = 0.0;
  for (Real x : p)
    if (x > 0.0) h -= x * std::log(x);
  return std::max(h, 0.0);
}

std::vector<TraceRecord> trace_tokens(Model& model, std::span<const std::uint32_t> ids, const Tokenizer& tokenizer,
                                      Real tau) {
  if (ids.empty()) throw DomainError("cannot trace an empty text");
  if (ids.size() > model.config.T_max)
    throw ConfigurationError("text has " + std::to_string(ids.size()) + " tokens, more than T_max");
  ForwardOptions opt;
  opt.tau = tau;
  const ModelOutput out = model_forward(model, ids, opt);
  std::vector<std::size_t> memory_blocks;
  for (std::size_t l = 0; l < model.blocks.size(); ++l)
    if (model.blocks[l].cell) memory_blocks.push_back(l);
  std::vector<TraceRecord> records;
  for (std::size_t k = 0; k < out.traces.size(); ++k) {
    const RoutingResult& t = out.traces[k];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      TraceRecord r;
      r.block = memory_blocks[k];
      r.position = i;
      r.token_id = ids[i];
      r.token_text = tokenizer.token_text(ids[i]);
      r.source_slot = argmax(t.w_src.row(i));
      r.target_slot = argmax(t.w_tgt.row(i));
      r.source_entropy = entropy(t.w_src.row(i));
      r.target_entropy = entropy(t.w_tgt.row(i));
      r.displacement_norm = l2(t.displacement.row(i));
      r.self_route = r.source_slot == r.target_slot;
      records.push_back(std::move(r));
    }
  }
  return records;
}

std::vector<TraceRecord> trace_text(Model& model, std::string_view text, const Tokenizer& tokenizer, Real tau) {
  if (text.empty()) throw DomainError("cannot trace an empty text");
  const std::vector<std::uint32_t> ids = tokenizer.encode(text);
  return trace_tokens(model, ids, tokenizer, tau);
}

UsageSummary usage_summary(std::span<const Real> usage) {
  UsageSummary s;
  if (usage.empty()) return s;
  std::vector<Real> x(usage.begin(), usage.end());
  for (Real v : x)
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("usage values must be finite and nonnegative");
  std::sort(x.begin(), x.end());
  const Real total = std::accumulate(x.begin(), x.end(), 0.0);
  if (total <= 0.0) throw DomainError("usage vector has no mass");
  const std::size_t n = x.size();
  std::vector<Real> pos;
  for (Real v : x)
    if (v > 0.0) pos.push_back(v);
  s.unique = pos.size();

  if (pos.front() == pos.back()) {
    // equal masses on the support
    s.n_eff = static_cast<Real>(pos.size());
    s.top_share = 1.0 / static_cast<Real>(pos.size());
  } else {
    std::vector<Real> p;
    for (Real v : pos) p.push_back(v / total);
    s.n_eff = std::clamp(std::exp(entropy(p)), 1.0, static_cast<Real>(pos.size()));
    s.top_share = x.back() / total;
  }
  // Σ(2i − n − 1)x_i with the mirrored terms paired
  Real acc = 0.0;
  for (std::size_t i = n / 2 + 1; i <= n; ++i)
    acc += static_cast<Real>(2 * i - n - 1) * (x[i - 1] - x[n - i]);
  s.gini = acc / (static_cast<Real>(n) * total);
  return s;
}

json UtilizationStats::to_json() const {
  return {{"block", block}, {"n_eff", n_eff}, {"unique_slots", unique_slots}, {"gini", gini},
          {"top_share", top_share}, {"dead", dead}, {"mean_cos_sim", mean_cos_sim}};
}

std::vector<UtilizationStats> utilization_stats(const Model& model) {
  std::vector<UtilizationStats> out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const Block& b = model.blocks[l];
    if (!b.cell) continue;
    const CentroidBank& bank = b.cell->bank;
    const UsageSummary u = usage_summary(bank.usage);
    out.push_back({l, u.n_eff, u.unique, u.gini, u.top_share, dead_count(bank, model.config.maintenance.delta_dead),
                   mean_pairwise_cosine(bank.C.value)});
  }
  return out;
}

std::vector<UtilizationStats> utilization_stats(const Model& model, std::span<const TraceRecord> trace) {
  if (trace.empty()) throw DomainError("empty trace");
  std::vector<UtilizationStats> out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const Block& b = model.blocks[l];
    if (!b.cell) continue;
    const CentroidBank& bank = b.cell->bank;
    std::vector<Real> counts(bank.slots(), 0.0);
    bool any = false;
    for (const TraceRecord& r : trace) {
      if (r.block != l) continue;
      if (r.source_slot >= counts.size()) throw DomainError("trace slot outside the bank");
      counts[r.source_slot] += 1.0;
      any = true;
    }
    if (!any) continue;
    const UsageSummary u = usage_summary(counts);
    out.push_back({l, u.n_eff, u.unique, u.gini, u.top_share, dead_count(bank, model.config.maintenance.delta_dead),
                   mean_pairwise_cosine(bank.C.value)});
  }
  return out;
}

std::string EdgeTable::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "block,slot";
  for (std::size_t j = 0; j < rows.cols(); ++j) os << ",p" << j;
  os << ",entropy,max_mass\n";
  for (std::size_t r = 0; r < slots.size(); ++r) {
    os << block << ',' << slots[r];
    for (Real v : rows.row(r)) os << ',' << v;
    os << ',' << row_entropy[r] << ',' << max_mass[r] << '\n';
  }
  return os.str();
}

EdgeTable edge_structure_export(const CentroidBank& bank, const EdgeGraph& edges, std::size_t top_k,
                                std::size_t block) {
  const std::size_t F = bank.slots();
  if (top_k == 0 || top_k > F) throw ConfigurationError("top_k must lie in [1, F]");
  std::vector<std::size_t> order(F);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return bank.usage[a] > bank.usage[b]; });
  const Matrix P = transition_matrix(edges);
  EdgeTable t;
  t.block = block;
  t.slots.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
  t.rows = Matrix(top_k, F);
  for (std::size_t r = 0; r < top_k; ++r) {
    std::span<const Real> src = P.row(t.slots[r]);
    std::copy(src.begin(), src.end(), t.rows.row(r).begin());
    t.row_entropy.push_back(entropy(src));
    t.max_mass.push_back(*std::max_element(src.begin(), src.end()));
  }
  return t;
}

MemoryHealth memory_health(const Model& model) {
  MemoryHealth h;
  std::size_t blocks = 0;
  h.n_eff_min = std::numeric_limits<Real>::infinity();
  for (const Block& b : model.blocks) {
    if (!b.cell) continue;
    const CentroidBank& bank = b.cell->bank;
    const Real n_eff = usage_summary(bank.usage).n_eff;
    h.n_eff_mean += n_eff;
    h.n_eff_min = std::min(h.n_eff_min, n_eff);
    h.dead_total += dead_count(bank, model.config.maintenance.delta_dead);
    h.mean_cos_sim += mean_pairwise_cosine(bank.C.value);
    const Matrix P = transition_matrix(b.cell->edges);
    Real ent = 0.0, mass = 0.0;
    for (std::size_t i = 0; i < P.rows(); ++i) {
      ent += entropy(P.row(i));
      mass += *std::max_element(P.row(i).begin(), P.row(i).end());
    }
    h.edge_entropy_mean += ent / static_cast<Real>(P.rows());
    h.max_edge_mass += mass / static_cast<Real>(P.rows());
    h.edge_row_sim += edge_contrast_loss(P);
    ++blocks;
  }
  if (blocks == 0) return MemoryHealth{};
  const Real inv = 1.0 / static_cast<Real>(blocks);
  h.n_eff_mean *= inv;
  h.mean_cos_sim *= inv;
  h.edge_entropy_mean *= inv;
  h.max_edge_mass *= inv;
  h.edge_row_sim *= inv;
  return h;
}

Real text_loss(Model& model, std::span<const std::uint32_t> ids, Real tau, Real alpha) {
  if (ids.size() < 2) throw DomainError("need at least 2 tokens for a next-token loss");
  const std::size_t T = std::min(ids.size() - 1, model.config.T_max);
  const std::size_t windows = (ids.size() - 1) / T;
  ForwardOptions opt;
  opt.tau = tau;
  opt.displacement_scale = alpha;
  Real total = 0.0;
  for (std::size_t w = 0; w < windows; ++w) {
    std::span<const std::uint32_t> input = ids.subspan(w * T, T);
    std::span<const std::uint32_t> target = ids.subspan(w * T + 1, T);
    total += cross_entropy(model_forward(model, input, opt).logits, target);
  }
  return total / static_cast<Real>(windows);
}

std::vector<SweepRow> displacement_sweep(Model& model, std::span<const std::uint32_t> ids,
                                         std::span<const Real> alphas, Real tau) {
  std::vector<SweepRow> rows;
  for (Real a : alphas) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigurationError("sweep alphas must be finite and nonnegative");
    rows.push_back({a, text_loss(model, ids, tau, a)});
  }
  return rows;
}

std::uint32_t state_checksum(const Model& model) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  auto feed = [&](const void* p, std::size_t n) {
    crc = ::crc32(crc, static_cast<const Bytef*>(p), static_cast<uInt>(n));
  };
  for (const Parameter* p : model.parameters()) feed(p->value.data(), p->value.size() * sizeof(Real));
  for (const Block& b : model.blocks) {
    if (!b.cell) continue;
    feed(b.cell->bank.usage.data(), b.cell->bank.usage.size() * sizeof(Real));
    feed(b.cell->bank.age.data(), b.cell->bank.age.size() * sizeof(std::uint64_t));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace gmt
