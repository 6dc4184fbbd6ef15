#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "contrec/diffusion.hpp"
#include "contrec/retrieval.hpp"
#include "contrec/tokenizer.hpp"
#include "contrec/trainer.hpp"

namespace py = pybind11;
using namespace contrec;

PYBIND11_MODULE(_contrec, m) {
  m.doc() = "continuous-token generative recommender";

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("set", &RunConfig::set)
      .def("validate", &RunConfig::validate)
      .def("canonical", &RunConfig::canonical)
      .def("hash", &RunConfig::hash);
  m.def("load_config", &load_config);

  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("n_users", &SynthConfig::n_users)
      .def_readwrite("n_items", &SynthConfig::n_items)
      .def_readwrite("n_categories", &SynthConfig::n_categories)
      .def_readwrite("n_brands", &SynthConfig::n_brands)
      .def_readwrite("events_per_user", &SynthConfig::events_per_user)
      .def_readwrite("categories_per_user", &SynthConfig::categories_per_user)
      .def_readwrite("preference_strength", &SynthConfig::preference_strength)
      .def_readwrite("seed", &SynthConfig::seed);
  m.def("generate_synth", &generate_synth);

  m.def("run_ingest", [](const RunConfig& cfg) {
    IngestSummary s = run_ingest(cfg);
    py::dict d;
    d["n_users"] = s.n_users;
    d["n_items"] = s.n_items;
    d["n_interactions"] = s.n_interactions;
    d["n_train"] = s.n_train;
    d["n_valid"] = s.n_valid;
    d["n_test"] = s.n_test;
    d["dropped_valid"] = s.dropped_valid;
    d["dropped_test"] = s.dropped_test;
    return d;
  });
  m.def("run_train_tokenizer", &run_train_tokenizer);
  m.def("run_train_recommender", &run_train_recommender);
  m.def("run_evaluate", [](const RunConfig& cfg, const std::string& split) {
    EvalSummary s = run_evaluate(cfg, split);
    py::dict d;
    d["hr10_mean"] = s.hr10_mean;
    d["hr10_std"] = s.hr10_std;
    d["hr20_mean"] = s.hr20_mean;
    d["hr20_std"] = s.hr20_std;
    d["ndcg10_mean"] = s.ndcg10_mean;
    d["ndcg10_std"] = s.ndcg10_std;
    d["ndcg20_mean"] = s.ndcg20_mean;
    d["ndcg20_std"] = s.ndcg20_std;
    return d;
  }, py::arg("cfg"), py::arg("split") = "test");
  m.def("run_reconstruct_bench", [](const RunConfig& cfg) {
    BenchCurves c = run_reconstruct_bench(cfg);
    py::dict d;
    d["methods"] = c.methods;
    d["steps"] = c.steps;
    d["mse"] = c.mse;
    return d;
  });

  // numeric primitives
  m.def("dispersive_loss", &dispersive_loss, py::arg("h"), py::arg("iota") = 0.5);
  m.def("hybrid_score", &hybrid_score, py::arg("y_hat"), py::arg("q"),
        py::arg("pi_flag"), py::arg("pi_val") = 0.05);
  m.def("rank_topk", &rank_topk, py::arg("scores"), py::arg("K"),
        py::arg("excluded") = std::vector<int>{});
  m.def("compute_metrics", [](const std::vector<std::vector<int>>& rankings,
                              const std::vector<int>& targets) {
    MetricReport r = compute_metrics(rankings, targets);
    py::dict d;
    d["hr10"] = r.hr10;
    d["hr20"] = r.hr20;
    d["ndcg10"] = r.ndcg10;
    d["ndcg20"] = r.ndcg20;
    return d;
  });

  py::class_<SigmaVae>(m, "SigmaVae")
      .def_static("load", &SigmaVae::load)
      .def("tokenize",
           [](SigmaVae& self, const Vec& x) {
             Rng unused(0);
             return self.tokenize(x, unused, false).tokens;
           })
      .def("reconstruct", [](SigmaVae& self, const Vec& x) {
        Rng unused(0);
        return self.decode(self.tokenize(x, unused, false));
      });
}
