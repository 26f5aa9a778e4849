#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gmt/diagnostics.hpp"
#include "gmt/evaluation.hpp"
#include "gmt/training.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

py::array_t<double> to_numpy(const gmt::Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  auto r = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) r(i, j) = m(i, j);
  return out;
}

gmt::ModelConfig model_config(const std::string& text) { return gmt::ModelConfig::from_json(json::parse(text)); }

std::string trace_json(const std::vector<gmt::TraceRecord>& records) {
  json out = json::array();
  for (const auto& r : records) out.push_back(r.to_json());
  return out.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "graph-memory transformer core";

  py::register_exception<gmt::ConfigurationError>(m, "ConfigurationError", PyExc_ValueError);
  py::register_exception<gmt::DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<gmt::LoadError>(m, "LoadError", PyExc_IOError);
  py::register_exception<gmt::TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  py::class_<gmt::Model>(m, "Model")
      .def_static(
          "create", [](const std::string& config, std::uint64_t seed) { return gmt::Model::create(model_config(config), seed); },
          py::arg("config_json"), py::arg("seed") = 0)
      .def_property_readonly("config_json", [](const gmt::Model& self) { return self.config.to_json().dump(); })
      .def("parameter_count", &gmt::Model::parameter_count)
      .def(
          "forward",
          [](gmt::Model& self, std::vector<std::uint32_t> ids, double tau, bool adaptive, double alpha) {
            gmt::ForwardOptions opt;
            opt.tau = tau;
            opt.adaptive = adaptive;
            opt.displacement_scale = alpha;
            return to_numpy(gmt::model_forward(self, ids, opt).logits);
          },
          py::arg("ids"), py::arg("tau") = 1.0, py::arg("adaptive") = false, py::arg("alpha") = 1.0)
      .def("parameter",
           [](const gmt::Model& self, const std::string& name) {
             for (const gmt::Parameter* p : self.parameters())
               if (p->name == name) return to_numpy(p->value);
             throw py::key_error(name);
           })
      .def("parameter_names",
           [](const gmt::Model& self) {
             std::vector<std::string> names;
             for (const gmt::Parameter* p : self.parameters()) names.push_back(p->name);
             return names;
           })
      .def("usage",
           [](const gmt::Model& self, std::size_t block) {
             if (block >= self.blocks.size() || !self.blocks[block].cell) throw py::index_error("no memory cell there");
             return self.blocks[block].cell->bank.usage;
           })
      .def("checksum", [](const gmt::Model& self) { return gmt::state_checksum(self); })
      .def(
          "trace_json",
          [](gmt::Model& self, const std::string& text, double tau) {
            return trace_json(gmt::trace_text(self, text, gmt::ByteTokenizer{}, tau));
          },
          py::arg("text"), py::arg("tau") = 1.0)
      .def("utilization_json",
           [](const gmt::Model& self) {
             json out = json::array();
             for (const auto& s : gmt::utilization_stats(self)) out.push_back(s.to_json());
             return out.dump();
           })
      .def(
          "edges_csv",
          [](const gmt::Model& self, std::size_t block, std::size_t top_k) {
            if (block >= self.blocks.size() || !self.blocks[block].cell) throw py::index_error("no memory cell there");
            const auto& cell = *self.blocks[block].cell;
            return gmt::edge_structure_export(cell.bank, cell.edges, top_k, block).to_csv();
          },
          py::arg("block"), py::arg("top_k"))
      .def(
          "sweep",
          [](gmt::Model& self, const std::string& text, std::vector<double> alphas, double tau) {
            const std::vector<std::uint32_t> ids = gmt::ByteTokenizer{}.encode(text);
            std::vector<std::pair<double, double>> out;
            for (const auto& r : gmt::displacement_sweep(self, ids, alphas, tau)) out.emplace_back(r.alpha, r.loss);
            return out;
          },
          py::arg("text"), py::arg("alphas"), py::arg("tau") = 1.0)
      .def(
          "score_choice",
          [](gmt::Model& self, std::vector<std::uint32_t> context, std::vector<std::uint32_t> choice, double tau) {
            gmt::ScoreOptions opt;
            opt.tau = tau;
            gmt::ChoiceScore s = gmt::score_choice(self, context, choice, opt);
            return std::make_pair(s.raw, s.norm);
          },
          py::arg("context"), py::arg("choice"), py::arg("tau") = 1.0);

  py::class_<gmt::TrainingState>(m, "TrainingState")
      .def_property_readonly("model", [](gmt::TrainingState& s) -> gmt::Model& { return s.model; },
                             py::return_value_policy::reference_internal)
      .def_readonly("step", &gmt::TrainingState::step)
      .def_readonly("best_val", &gmt::TrainingState::best_val)
      .def("save", [](const gmt::TrainingState& s, const std::filesystem::path& p) { gmt::checkpoint_save(s, p); });

  m.def("load_checkpoint",
        [](const std::filesystem::path& path) { return gmt::state_from_checkpoint(gmt::checkpoint_load(path)); });

  m.def(
      "train",
      [](const std::string& config, const std::filesystem::path& data, const std::filesystem::path& out,
         std::optional<std::filesystem::path> resume) {
        gmt::RunConfig rc = gmt::RunConfig::from_json(json::parse(config));
        gmt::TokenWindowStream tr = gmt::load_stream(data / "train.bin");
        gmt::TokenWindowStream va = gmt::load_stream(data / "val.bin");
        gmt::TrainingState state(gmt::Model::create(rc.model, rc.train.seed), rc.train);
        gmt::RunOptions opt;
        opt.out_dir = out;
        opt.resume = resume;
        gmt::RunSummary s;
        {
          py::gil_scoped_release release;
          s = gmt::run_training(state, tr, va, opt);
        }
        json evals = json::array();
        for (const auto& e : s.evals) evals.push_back(e.to_json());
        return json{{"steps", s.steps}, {"best_val", s.best_val}, {"evals", evals}}.dump();
      },
      py::arg("config_json"), py::arg("data_dir"), py::arg("out_dir"), py::arg("resume") = py::none());

  m.def("prepare", [](const std::filesystem::path& input, const std::filesystem::path& out, double split, bool blank_lines) {
    auto docs = gmt::read_documents(input, blank_lines ? gmt::DocumentMode::blank_line : gmt::DocumentMode::per_file);
    auto [train, val] = gmt::split_documents(docs, {split});
    gmt::ByteTokenizer tok;
    std::filesystem::create_directories(out);
    gmt::save_stream(gmt::tokenize_documents(train, tok), out / "train.bin");
    gmt::save_stream(gmt::tokenize_documents(val, tok), out / "val.bin");
    return std::make_pair(train.size(), val.size());
  }, py::arg("input_dir"), py::arg("out_dir"), py::arg("split") = 0.95, py::arg("blank_lines") = false);

  m.def("parameter_count", [](const std::string& config) {
    gmt::ParameterBreakdown b = gmt::parameter_count(model_config(config));
    return std::make_pair(b.total, b.components);
  });
  m.def("grad_check_json", [](const std::string& config, std::uint64_t seed) {
    gmt::GradCheckResult r = gmt::config_grad_check(model_config(config), seed);
    return json{{"checked", r.checked}, {"max_relative_error", r.max_relative_error},
                {"worst_parameter", r.worst_parameter}}
        .dump();
  }, py::arg("config_json"), py::arg("seed") = 7);

  m.def("temperature_schedule", &gmt::temperature_schedule, py::arg("step"), py::arg("total"), py::arg("tau_max"),
        py::arg("tau_min"));
  m.def("lr_schedule", &gmt::lr_schedule, py::arg("step"), py::arg("warmup"), py::arg("total"), py::arg("peak"),
        py::arg("min_ratio") = 0.0);
  m.def("perplexity", &gmt::perplexity);
  m.def("entropy", [](std::vector<double> p) { return gmt::entropy(p); });
  m.def("usage_summary", [](std::vector<double> u) {
    gmt::UsageSummary s = gmt::usage_summary(u);
    py::dict d;
    d["n_eff"] = s.n_eff;
    d["gini"] = s.gini;
    d["top_share"] = s.top_share;
    d["unique"] = s.unique;
    return d;
  });
  m.def("encode", [](const std::string& text) { return gmt::ByteTokenizer{}.encode(text); });
  m.def("decode", [](std::vector<std::uint32_t> ids) { return py::bytes(gmt::ByteTokenizer{}.decode(ids)); });
}
