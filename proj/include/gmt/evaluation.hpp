#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gmt/corpus.hpp"
#include "gmt/model.hpp"
#include "json.hpp"

namespace gmt {

struct ChoiceItem {
  std::string question;
  std::vector<std::string> choices;
  std::size_t gold = 0;

  void validate() const;
};

/// JSON Lines {question, choices[], gold}; blank lines ignored.
std::vector<ChoiceItem> load_items(const std::filesystem::path& path);
std::vector<ChoiceItem> parse_items(std::string_view jsonl);

struct ChoiceScore {
  Real raw = 0.0;   // Σ log p(a_j | context, a_<j)
  Real norm = 0.0;  // raw / m
};

struct ScoreOptions {
  bool adaptive = false;
  Real tau = 1.0;
};

/// One teacher-forced forward over context + choice. Throws ConfigurationError when the
/// combined length exceeds T_max.
ChoiceScore score_choice(Model& model, std::span<const std::uint32_t> context, std::span<const std::uint32_t> choice,
                         const ScoreOptions& options = {});

/// Index of the largest score, lowest index on ties.
std::size_t select_choice(std::span<const Real> scores);

/// "Question: {q}\nAnswer:"
std::string render_context(const std::string& question);
/// Choice text with one leading space.
std::string render_choice(const std::string& choice);

struct ItemRecord {
  std::size_t index = 0;
  bool skipped = false;
  std::string reason;
  std::vector<ChoiceScore> scores;
  std::size_t pred_raw = 0;
  std::size_t pred_norm = 0;
  std::size_t gold = 0;

  nlohmann::json to_json() const;
};

struct ChoiceReport {
  Real acc_raw = 0.0;
  Real acc_norm = 0.0;
  std::size_t n = 0;        // scored items
  std::size_t skipped = 0;  // context window overflow
  std::vector<ItemRecord> items;

  nlohmann::json to_json() const;
};

ChoiceReport evaluate_choices(Model& model, std::span<const ChoiceItem> items, const Tokenizer& tokenizer,
                              const ScoreOptions& options = {});

}  // namespace gmt
