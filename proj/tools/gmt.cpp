#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "gmt/diagnostics.hpp"
#include "gmt/evaluation.hpp"
#include "gmt/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::unique_ptr<gmt::Tokenizer> make_tokenizer(const std::string& name) {
  if (name == "byte") return std::make_unique<gmt::ByteTokenizer>();
  throw gmt::ConfigurationError("unknown tokenizer '" + name + "' (available: byte)");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gmt::ConfigurationError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw gmt::ConfigurationError("cannot write " + path.string());
  out << text;
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") std::cout << text;
  else write_text(out, text);
}

gmt::TrainingState load_state(const fs::path& ckpt) { return gmt::state_from_checkpoint(gmt::checkpoint_load(ckpt)); }

gmt::Real schedule_tau(const gmt::TrainingState& s) {
  const std::uint64_t S = std::max<std::uint64_t>(s.train.total_steps, 1);
  return gmt::temperature_schedule(s.step, S, s.model.config.tau_max, s.model.config.tau_min);
}

std::vector<gmt::Real> parse_alphas(const std::string& list) {
  std::vector<gmt::Real> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw gmt::ConfigurationError("bad alpha '" + item + "'");
    }
  }
  if (out.empty()) throw gmt::ConfigurationError("no alphas given");
  return out;
}

struct Args {
  std::string input, out, tokenizer = "byte", config, data, resume, ckpt, stream, items, template_name = "qa", text,
                             trace, alphas = "0,0.5,1,2";
  double split = 0.95;
  double tau = -1.0;
  bool blank_lines = false, frozen = false, adaptive = false, quiet = false;
  std::size_t top = 32;
  std::uint64_t seed = 7;
  double tolerance = 1e-4;
};

int cmd_prepare(const Args& a) {
  auto tok = make_tokenizer(a.tokenizer);
  auto docs = gmt::read_documents(a.input, a.blank_lines ? gmt::DocumentMode::blank_line : gmt::DocumentMode::per_file);
  auto [train, val] = gmt::split_documents(docs, {a.split});
  gmt::TokenWindowStream tr = gmt::tokenize_documents(train, *tok);
  gmt::TokenWindowStream va = gmt::tokenize_documents(val, *tok);
  fs::create_directories(a.out);
  gmt::save_stream(tr, fs::path(a.out) / "train.bin");
  gmt::save_stream(va, fs::path(a.out) / "val.bin");
  std::cout << json{{"documents", docs.size()},    {"train_documents", train.size()}, {"val_documents", val.size()},
                    {"train_tokens", tr.ids.size()}, {"val_tokens", va.ids.size()},     {"out", a.out}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const Args& a) {
  gmt::RunConfig rc = gmt::RunConfig::load(a.config);
  gmt::TokenWindowStream tr = gmt::load_stream(fs::path(a.data) / "train.bin");
  gmt::TokenWindowStream va = gmt::load_stream(fs::path(a.data) / "val.bin");
  if (tr.vocab_size > rc.model.V)
    throw gmt::ConfigurationError("stream vocabulary " + std::to_string(tr.vocab_size) + " exceeds model V");
  gmt::TrainingState state(gmt::Model::create(rc.model, rc.train.seed), rc.train);
  gmt::RunOptions opt;
  opt.out_dir = a.out;
  if (!a.resume.empty()) opt.resume = a.resume;
  if (!a.quiet) {
    opt.on_eval = [](const gmt::EvalRecord& r) { std::cout << r.to_json().dump() << std::endl; };
  }
  gmt::RunSummary s = gmt::run_training(state, tr, va, opt);
  std::cout << json{{"steps", s.steps}, {"best_val", s.best_val}}.dump() << "\n";
  return 0;
}

int cmd_validate(const Args& a) {
  gmt::TrainingState s = load_state(a.ckpt);
  gmt::TokenWindowStream val = gmt::load_stream(a.stream);
  const gmt::Real tau = a.tau > 0 ? a.tau : schedule_tau(s);
  const bool adaptive = !a.frozen && s.train.adaptive_eval;
  gmt::ValidationResult r = gmt::validate(s.model, val, s.train.B, s.train.eval_batches_cap, adaptive, tau);
  std::cout << json{{"val_loss", r.val_loss}, {"ppl", r.ppl}, {"batches", r.batches}, {"adaptive", adaptive},
                    {"tau", tau}, {"step", s.step}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_score(const Args& a) {
  if (a.template_name != "qa") throw gmt::ConfigurationError("unknown template '" + a.template_name + "'");
  gmt::TrainingState s = load_state(a.ckpt);
  auto items = gmt::load_items(a.items);
  auto tok = make_tokenizer(a.tokenizer);
  gmt::ScoreOptions opt;
  opt.adaptive = a.adaptive;
  opt.tau = a.tau > 0 ? a.tau : schedule_tau(s);
  gmt::ChoiceReport r = gmt::evaluate_choices(s.model, items, *tok, opt);
  if (!a.out.empty()) write_text(a.out, r.to_json().dump(2) + "\n");
  std::cout << json{{"acc_raw", r.acc_raw}, {"acc_norm", r.acc_norm}, {"n", r.n}, {"skipped", r.skipped}}.dump()
            << "\n";
  return 0;
}

int cmd_trace(const Args& a) {
  gmt::TrainingState s = load_state(a.ckpt);
  auto tok = make_tokenizer(a.tokenizer);
  const gmt::Real tau = a.tau > 0 ? a.tau : schedule_tau(s);
  auto records = gmt::trace_text(s.model, read_text(a.text), *tok, tau);
  std::string lines;
  for (const auto& r : records) lines += r.to_json().dump() + "\n";
  emit(a.out, lines);
  return 0;
}

int cmd_stats(const Args& a) {
  gmt::TrainingState s = load_state(a.ckpt);
  std::vector<gmt::UtilizationStats> stats;
  if (a.trace.empty()) {
    stats = gmt::utilization_stats(s.model);
  } else {
    std::ifstream in(a.trace);
    if (!in) throw gmt::ConfigurationError("cannot read " + a.trace);
    std::vector<gmt::TraceRecord> trace;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        trace.push_back(gmt::TraceRecord::from_json(json::parse(line)));
      } catch (const json::parse_error& e) {
        throw gmt::LoadError(std::string("bad trace line: ") + e.what());
      }
    }
    stats = gmt::utilization_stats(s.model, trace);
  }
  json blocks = json::array();
  for (const auto& b : stats) blocks.push_back(b.to_json());
  gmt::MemoryHealth h = gmt::memory_health(s.model);
  json out = {{"source", a.trace.empty() ? "usage" : "trace"},
              {"step", s.step},
              {"blocks", blocks},
              {"edge_entropy_mean", h.edge_entropy_mean},
              {"max_edge_mass", h.max_edge_mass},
              {"edge_row_sim", h.edge_row_sim}};
  emit(a.out, out.dump(2) + "\n");
  return 0;
}

int cmd_edges(const Args& a) {
  gmt::TrainingState s = load_state(a.ckpt);
  std::string csv;
  for (std::size_t l = 0; l < s.model.blocks.size(); ++l) {
    const auto& b = s.model.blocks[l];
    if (!b.cell) continue;
    std::string part = gmt::edge_structure_export(b.cell->bank, b.cell->edges, std::min(a.top, b.cell->bank.slots()), l)
                           .to_csv();
    if (!csv.empty()) part.erase(0, part.find('\n') + 1);
    csv += part;
  }
  if (csv.empty()) throw gmt::ConfigurationError("model has no graph-memory blocks");
  emit(a.out, csv);
  return 0;
}

int cmd_sweep(const Args& a) {
  gmt::TrainingState s = load_state(a.ckpt);
  auto tok = make_tokenizer(a.tokenizer);
  const std::vector<std::uint32_t> ids = tok->encode(read_text(a.text));
  const gmt::Real tau = a.tau > 0 ? a.tau : schedule_tau(s);
  const std::vector<gmt::Real> alphas = parse_alphas(a.alphas);
  std::ostringstream os;
  os << std::setprecision(17) << "alpha,loss\n";
  for (const auto& row : gmt::displacement_sweep(s.model, ids, alphas, tau)) os << row.alpha << ',' << row.loss << '\n';
  emit(a.out, os.str());
  return 0;
}

int cmd_gradcheck(const Args& a) {
  gmt::RunConfig rc = gmt::RunConfig::load(a.config);
  gmt::GradCheckResult r = gmt::config_grad_check(rc.model, a.seed);
  const bool ok = r.max_relative_error <= a.tolerance;
  std::cout << json{{"checked", r.checked},
                    {"max_relative_error", r.max_relative_error},
                    {"worst_parameter", r.worst_parameter},
                    {"worst_index", r.worst_index},
                    {"analytic", r.analytic},
                    {"numeric", r.numeric},
                    {"tolerance", a.tolerance},
                    {"pass", ok}}
                   .dump()
            << "\n";
  return ok ? 0 : 1;
}

int cmd_paramcount(const Args& a) {
  gmt::RunConfig rc = gmt::RunConfig::load(a.config);
  gmt::ParameterBreakdown b = gmt::parameter_count(rc.model);
  for (const auto& [name, n] : b.components) std::cout << std::left << std::setw(24) << name << n << "\n";
  std::cout << std::left << std::setw(24) << "total" << b.total << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph-memory transformer tools"};
  app.require_subcommand(1);
  Args a;

  auto* prepare = app.add_subcommand("prepare", "tokenize a text directory into train/val streams");
  prepare->add_option("--input", a.input, "directory of .txt documents")->required()->check(CLI::ExistingDirectory);
  prepare->add_option("--out", a.out, "output directory for train.bin and val.bin")->required();
  prepare->add_option("--tokenizer", a.tokenizer)->capture_default_str();
  prepare->add_option("--split", a.split, "train fraction of documents")->capture_default_str();
  prepare->add_flag("--blank-lines", a.blank_lines, "one document per blank-line separated block");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", a.config)->required()->check(CLI::ExistingFile);
  train->add_option("--data", a.data, "directory written by prepare")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", a.out)->required();
  train->add_option("--resume", a.resume)->check(CLI::ExistingFile);
  train->add_flag("--quiet", a.quiet);

  auto* validate = app.add_subcommand("validate", "validation loss of a checkpoint");
  validate->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  validate->add_option("--stream", a.stream)->required()->check(CLI::ExistingFile);
  validate->add_flag("--frozen", a.frozen, "no write-back or usage updates");
  validate->add_option("--tau", a.tau, "routing temperature (default: schedule at the checkpoint step)");

  auto* score = app.add_subcommand("score", "multiple-choice log-likelihood scoring");
  score->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  score->add_option("--items", a.items, "JSON Lines with question, choices, gold")->required()->check(CLI::ExistingFile);
  score->add_option("--template", a.template_name)->capture_default_str();
  score->add_option("--tokenizer", a.tokenizer)->capture_default_str();
  score->add_option("--out", a.out, "per-item report");
  score->add_option("--tau", a.tau);
  score->add_flag("--adaptive", a.adaptive, "allow memory updates while scoring");

  auto* trace = app.add_subcommand("trace", "per-token routing trace");
  trace->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  trace->add_option("--text", a.text)->required()->check(CLI::ExistingFile);
  trace->add_option("--out", a.out)->required();
  trace->add_option("--tokenizer", a.tokenizer)->capture_default_str();
  trace->add_option("--tau", a.tau);

  auto* stats = app.add_subcommand("stats", "memory utilization statistics");
  stats->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  stats->add_option("--trace", a.trace, "count source slots from a trace instead of smoothed usage");
  stats->add_option("--out", a.out)->required();

  auto* edges = app.add_subcommand("edges", "transition rows of the most used slots");
  edges->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  edges->add_option("--top", a.top)->capture_default_str()->check(CLI::PositiveNumber);
  edges->add_option("--out", a.out)->required();

  auto* sweep = app.add_subcommand("sweep", "loss with displacements scaled by alpha");
  sweep->add_option("--ckpt", a.ckpt)->required()->check(CLI::ExistingFile);
  sweep->add_option("--text", a.text)->required()->check(CLI::ExistingFile);
  sweep->add_option("--alphas", a.alphas)->capture_default_str();
  sweep->add_option("--tokenizer", a.tokenizer)->capture_default_str();
  sweep->add_option("--tau", a.tau);
  sweep->add_option("--out", a.out);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
  gradcheck->add_option("--config", a.config)->required()->check(CLI::ExistingFile);
  gradcheck->add_option("--seed", a.seed)->capture_default_str();
  gradcheck->add_option("--tolerance", a.tolerance)->capture_default_str();

  auto* paramcount = app.add_subcommand("paramcount", "trainable parameter breakdown");
  paramcount->add_option("--config", a.config)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) return cmd_prepare(a);
    if (*train) return cmd_train(a);
    if (*validate) return cmd_validate(a);
    if (*score) return cmd_score(a);
    if (*trace) return cmd_trace(a);
    if (*stats) return cmd_stats(a);
    if (*edges) return cmd_edges(a);
    if (*sweep) return cmd_sweep(a);
    if (*gradcheck) return cmd_gradcheck(a);
    if (*paramcount) return cmd_paramcount(a);
  } catch (const gmt::ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const gmt::LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 3;
  } catch (const gmt::TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
