// Python bindings over the C++ core. Matrices cross the boundary as float64
// NumPy arrays (copied); graphs, datasets and models are wrapped objects.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "agglab/aggregation.hpp"
#include "agglab/graph.hpp"
#include "agglab/layers.hpp"
#include "agglab/train.hpp"
#include "agglab/verify.hpp"

namespace py = pybind11;
using namespace agglab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) return Matrix(static_cast<std::size_t>(a.shape(0)), 1, std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw DimensionError("expected a 1-D or 2-D array, got " + std::to_string(a.ndim()) + "-D");
  return Matrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Matrix& m) {
  Array out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

ModelSpec model_spec(const std::string& kind, std::size_t d_in, std::size_t hidden, std::size_t layers, std::size_t s,
                     bool re_sum, std::size_t heads, std::uint64_t seed, const std::string& readout) {
  return make_model_spec(layer_kind_from_string(kind), d_in, hidden, layers, s, re_sum, heads, seed,
                         readout_mode_from_string(readout));
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["train_loss"] = m.train_loss;
  d["valid_loss"] = m.valid_loss;
  d["test_metric"] = m.test_metric;
  d["best_epoch"] = m.best_epoch;
  d["seconds"] = m.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Graph aggregation laboratory: layers, rank certificates and training harness";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  // Rank analysis
  m.def("numerical_rank", [](const Array& a, std::optional<double> tol) { return numerical_rank(to_matrix(a), tol); },
        py::arg("m"), py::arg("tol") = py::none());
  m.def("is_injective_for_size", [](const Array& a) { return is_injective_for_size(AggCoeffMatrix(to_matrix(a))); });
  m.def("strictly_stronger_by_stack", [](const Array& a, const Array& b) {
    return strictly_stronger_by_stack(AggCoeffMatrix(to_matrix(a)), AggCoeffMatrix(to_matrix(b)));
  });
  m.def("ranges_disjoint_certificate", [](const Array& a, const Array& b) {
    return ranges_disjoint_certificate(AggCoeffMatrix(to_matrix(a)), AggCoeffMatrix(to_matrix(b)));
  });
  m.def(
      "rank_preservation_report",
      [](const Array& mm, const Array& h) {
        const RankReport r = rank_preservation_report(AggCoeffMatrix(to_matrix(mm)), to_matrix(h));
        return py::make_tuple(r.rank_m, r.rank_h, r.rank_mh);
      },
      "(rank M, rank H, rank MH)");
  m.def(
      "apply_agg",
      [](const Array& mm, const std::vector<std::vector<double>>& elements) {
        return apply_agg(AggCoeffMatrix(to_matrix(mm)), MultisetSample(elements));
      },
      "vec(M X^T) for the multiset given as a list of equal-width vectors");

  // Graphs
  py::class_<Graph>(m, "Graph")
      .def(py::init([](std::size_t n, std::vector<Edge> edges, std::optional<Array> features,
                       std::optional<double> target) {
             if (!features) return Graph::structural(n, std::move(edges), target);
             return Graph(n, std::move(edges), to_matrix(*features), target);
           }),
           py::arg("num_nodes"), py::arg("edges"), py::arg("node_features") = py::none(), py::arg("target") = py::none())
      .def_property_readonly("num_nodes", &Graph::num_nodes)
      .def_property_readonly("edges", &Graph::edges)
      .def_property_readonly("node_features", [](const Graph& g) { return to_array(g.node_features()); })
      .def_property_readonly("target", &Graph::target)
      .def("degree", &Graph::degree)
      .def("neighborhood", [](const Graph& g, std::size_t v) { return neighborhood(g, v); })
      .def("relabel", [](const Graph& g, const std::vector<std::size_t>& perm) { return relabel(g, perm); })
      .def("__eq__", [](const Graph& a, const Graph& b) { return a == b; })
      .def("__repr__", [](const Graph& g) {
        return "Graph(num_nodes=" + std::to_string(g.num_nodes()) + ", edges=" + std::to_string(g.edges().size()) + ")";
      });
  m.def("count_triangles", &count_triangles);
  m.def("is_isomorphic", &is_isomorphic_bruteforce);
  m.def("gen_regular_pair", &gen_regular_pair, "K_{3,3} and the triangular prism");

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("graphs", &Dataset::graphs)
      .def_property_readonly("split",
                             [](const Dataset& d) {
                               py::dict s;
                               s["train"] = d.split.train;
                               s["valid"] = d.split.valid;
                               s["test"] = d.split.test;
                               return s;
                             })
      .def("__len__", [](const Dataset& d) { return d.graphs.size(); });
  m.def("gen_er_triangle_dataset", &gen_er_triangle_dataset, py::arg("count") = 500, py::arg("n_nodes") = 10,
        py::arg("p") = 0.3, py::arg("seed") = 0);
  m.def("regular_pair_dataset", &regular_pair_dataset);
  m.def("save_graphs", &save_graphs);
  m.def("load_graphs", &load_graphs);

  // Models
  m.def("layer_kinds", [] {
    std::vector<std::string> out;
    for (LayerKind k : all_layer_kinds()) out.push_back(to_string(k));
    return out;
  });
  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& kind, std::size_t d_in, std::size_t hidden, std::size_t layers, std::size_t s,
                       bool re_sum, std::size_t heads, std::uint64_t seed, const std::string& readout) {
             return Model(model_spec(kind, d_in, hidden, layers, s, re_sum, heads, seed, readout));
           }),
           py::arg("kind"), py::arg("d_in") = 1, py::arg("hidden") = 16, py::arg("layers") = 3, py::arg("s") = 1,
           py::arg("re_sum") = true, py::arg("heads") = 1, py::arg("seed") = 0, py::arg("readout") = "sum")
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("predict", &Model::predict)
      .def("embed", [](Model& mm, const Graph& g) { return to_array(mm.embed(g)); })
      .def("hidden_states",
           [](Model& mm, const Graph& g) {
             std::vector<Array> out;
             for (const Matrix& h : mm.hidden_states(g)) out.push_back(to_array(h));
             return out;
           })
      .def("parameters",
           [](const Model& mm) {
             py::dict d;
             std::size_t i = 0;
             for (const Parameter* p : mm.parameters()) d[py::str(std::to_string(i++) + ":" + p->name)] = to_array(p->value);
             return d;
           })
      .def("same_parameters", &Model::same_parameters)
      .def("save", &Model::save)
      .def_static("load", &Model::load);

  m.def(
      "train",
      [](const std::string& kind, const Dataset& data, std::size_t hidden, std::size_t layers, std::size_t s,
         bool re_sum, std::size_t epochs, std::size_t batch_size, double lr, std::size_t lr_step, double lr_decay,
         std::uint64_t seed, const std::string& loss) {
        if (data.graphs.empty()) throw ContractError("train: empty dataset");
        TrainConfig c;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.lr = lr;
        c.lr_step_size = lr_step;
        c.lr_decay = lr_decay;
        c.seed = seed;
        c.loss = loss_kind_from_string(loss);
        std::optional<TrainResult> r;
        {
          py::gil_scoped_release release;
          r.emplace(train(model_spec(kind, data.graphs.front().feature_width(), hidden, layers, s, re_sum, 1, seed, "sum"),
                          data, c));
        }
        return py::make_tuple(std::move(r->model), metrics_dict(r->metrics));
      },
      py::arg("kind"), py::arg("data"), py::arg("hidden") = 16, py::arg("layers") = 3, py::arg("s") = 1,
      py::arg("re_sum") = true, py::arg("epochs") = 100, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
      py::arg("lr_step") = 25, py::arg("lr_decay") = 1.0, py::arg("seed") = 0, py::arg("loss") = "mae",
      "Returns (model, metrics dict).");
  m.def("constant_predictor_mae", &constant_predictor_mae);

  // Property suites
  m.def("suite_names", &suite_names);
  m.def(
      "run_suite",
      [](const std::string& name, std::size_t trials, std::uint64_t seed) {
        py::module_ json = py::module_::import("json");
        py::list out;
        for (const SuiteResult& s : run_suite(name, {trials, seed}))
          for (const PropertyResult& p : s.properties) {
            py::dict d = json.attr("loads")(p.to_json());
            d["suite"] = s.suite;
            out.append(d);
          }
        return out;
      },
      py::arg("name") = "all", py::arg("trials") = 20, py::arg("seed") = 0,
      "One dict per property: property, verdict, matrix, witness, passed, trials, ...");
}
