#include "gmt/evaluation.hpp"

#include <fstream>
#include <sstream>

#include "gmt/ops.hpp"

namespace gmt {

using nlohmann::json;

void ChoiceItem::validate() const {
  if (choices.size() < 2) throw ConfigurationError("an item needs at least 2 choices");
  if (gold >= choices.size()) throw ConfigurationError("gold index " + std::to_string(gold) + " out of range");
}

std::vector<ChoiceItem> parse_items(std::string_view jsonl) {
  std::vector<ChoiceItem> items;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ChoiceItem item;
      item.question = j.at("question").get<std::string>();
      item.choices = j.at("choices").get<std::vector<std::string>>();
      item.gold = j.at("gold").get<std::size_t>();
      item.validate();
      items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw ConfigurationError("item line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

std::vector<ChoiceItem> load_items(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read items " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_items(ss.str());
}

ChoiceScore score_choice(Model& model, std::span<const std::uint32_t> context, std::span<const std::uint32_t> choice,
                         const ScoreOptions& options) {
  if (context.empty()) throw DomainError("empty context");
  if (choice.empty()) throw DomainError("empty choice");
  const std::size_t n = context.size() + choice.size();
  if (n > model.config.T_max)
    throw ConfigurationError("context plus choice spans " + std::to_string(n) + " tokens, beyond T_max");
  std::vector<std::uint32_t> seq(context.begin(), context.end());
  seq.insert(seq.end(), choice.begin(), choice.end());
  seq.pop_back();
  ForwardOptions opt;
  opt.adaptive = options.adaptive;
  opt.tau = options.tau;
  const Matrix logp = log_softmax_rows(model_forward(model, seq, opt).logits);
  ChoiceScore s;
  for (std::size_t j = 0; j < choice.size(); ++j) s.raw += logp(context.size() - 1 + j, choice[j]);
  s.norm = s.raw / static_cast<Real>(choice.size());
  return s;
}

std::size_t select_choice(std::span<const Real> scores) {
  if (scores.empty()) throw DomainError("no scores to select from");
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

std::string render_context(const std::string& question) { return "Question: " + question + "\nAnswer:"; }

std::string render_choice(const std::string& choice) { return " " + choice; }

json ItemRecord::to_json() const {
  json j = {{"index", index}, {"skipped", skipped}, {"gold", gold}};
  if (skipped) {
    j["reason"] = reason;
    return j;
  }
  json raw = json::array(), norm = json::array();
  for (const ChoiceScore& s : scores) {
    raw.push_back(s.raw);
    norm.push_back(s.norm);
  }
  j["raw"] = raw;
  j["norm"] = norm;
  j["pred_raw"] = pred_raw;
  j["pred_norm"] = pred_norm;
  return j;
}

json ChoiceReport::to_json() const {
  json records = json::array();
  for (const ItemRecord& r : items) records.push_back(r.to_json());
  return {{"acc_raw", acc_raw}, {"acc_norm", acc_norm}, {"n", n}, {"skipped", skipped}, {"items", records}};
}

ChoiceReport evaluate_choices(Model& model, std::span<const ChoiceItem> items, const Tokenizer& tokenizer,
                              const ScoreOptions& options) {
  if (items.empty()) throw ConfigurationError("no items to evaluate");
  ChoiceReport report;
  std::size_t hits_raw = 0, hits_norm = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const ChoiceItem& item = items[i];
    item.validate();
    ItemRecord rec;
    rec.index = i;
    rec.gold = item.gold;
    const std::vector<std::uint32_t> context = tokenizer.encode(render_context(item.question));
    try {
      for (const std::string& c : item.choices)
        rec.scores.push_back(score_choice(model, context, tokenizer.encode(render_choice(c)), options));
    } catch (const ConfigurationError& e) {
      rec.skipped = true;
      rec.reason = e.what();
      rec.scores.clear();
      ++report.skipped;
      report.items.push_back(std::move(rec));
      continue;
    }
    std::vector<Real> raw, norm;
    for (const ChoiceScore& s : rec.scores) {
      raw.push_back(s.raw);
      norm.push_back(s.norm);
    }
    rec.pred_raw = select_choice(raw);
    rec.pred_norm = select_choice(norm);
    hits_raw += rec.pred_raw == item.gold;
    hits_norm += rec.pred_norm == item.gold;
    ++report.n;
    report.items.push_back(std::move(rec));
  }
  if (report.n > 0) {
    report.acc_raw = static_cast<Real>(hits_raw) / static_cast<Real>(report.n);
    report.acc_norm = static_cast<Real>(hits_norm) / static_cast<Real>(report.n);
  }
  return report;
}

}  // namespace gmt
