// agglab command-line entry point.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "agglab/graph.hpp"
#include "agglab/layers.hpp"
#include "agglab/train.hpp"
#include "agglab/verify.hpp"

using namespace agglab;
using nlohmann::json;

namespace {

void echo_config(const std::string& command, const json& config) {
  std::cout << "config " << json{{"command", command}, {"options", config}}.dump() << std::endl;
}

struct DataOptions {
  std::string path;
  std::size_t count = 500;
  std::size_t nodes = 10;
  double p = 0.3;
  std::uint64_t seed = 0;

  void add_to(CLI::App& app) {
    app.add_option("--data", path, "JSON-lines dataset (default: generate ER triangle-count graphs)");
    app.add_option("--data-count", count, "Graphs to generate when --data is absent")->check(CLI::PositiveNumber);
    app.add_option("--data-nodes", nodes, "Nodes per generated graph")->check(CLI::PositiveNumber);
    app.add_option("--data-p", p, "Edge probability of generated graphs")->check(CLI::Range(0.0, 1.0));
    app.add_option("--data-seed", seed, "Seed of the generated dataset");
  }
  json to_json() const {
    if (!path.empty()) return {{"data", path}};
    return {{"data", nullptr}, {"data_count", count}, {"data_nodes", nodes}, {"data_p", p}, {"data_seed", seed}};
  }
  Dataset load() const { return path.empty() ? gen_er_triangle_dataset(count, nodes, p, seed) : load_graphs(path); }
};

struct TrainOptions {
  TrainConfig config;
  std::string loss = "mae";
  std::string readout = "sum";

  void add_to(CLI::App& app) {
    app.add_option("--epochs", config.epochs)->check(CLI::PositiveNumber);
    app.add_option("--batch-size", config.batch_size)->check(CLI::PositiveNumber);
    app.add_option("--lr", config.lr)->check(CLI::NonNegativeNumber);
    app.add_option("--lr-step", config.lr_step_size, "Epochs between learning-rate decays")->check(CLI::PositiveNumber);
    app.add_option("--lr-decay", config.lr_decay, "Multiplier applied every --lr-step epochs");
    app.add_option("--loss", loss)->check(CLI::IsMember({"mae", "mse", "cross_entropy"}));
    app.add_option("--readout", readout)->check(CLI::IsMember({"sum", "mean"}));
    app.add_flag("--record-time", config.record_time, "Write wall-clock seconds into the CSV (breaks byte-reproducibility)");
  }
  TrainConfig resolve() {
    config.loss = loss_kind_from_string(loss);
    config.readout = readout_mode_from_string(readout);
    config.validate();
    return config;
  }
  json to_json() const {
    return {{"epochs", config.epochs},     {"batch_size", config.batch_size}, {"lr", config.lr},
            {"lr_step", config.lr_step_size}, {"lr_decay", config.lr_decay}, {"loss", loss},
            {"readout", readout},          {"record_time", config.record_time}};
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string model_label(LayerKind kind, std::size_t s, bool re_sum) {
  std::string label = to_string(kind);
  if (kind == LayerKind::ExpC || kind == LayerKind::ExpCMultiAgg || kind == LayerKind::ExpCThreeStage)
    label += "-" + std::to_string(s);
  if (!re_sum) label += "*";
  return label;
}

int cmd_gen_data(const std::string& kind, std::size_t count, std::size_t nodes, double p, std::uint64_t seed,
                 const std::string& out) {
  echo_config("gen-data", {{"kind", kind}, {"count", count}, {"nodes", nodes}, {"p", p}, {"seed", seed}, {"out", out}});
  const Dataset data = kind == "regular-pair" ? regular_pair_dataset() : gen_er_triangle_dataset(count, nodes, p, seed);
  save_graphs(data, out);
  double mean = 0.0;
  for (const Graph& g : data.graphs) mean += g.target().value_or(0.0);
  if (!data.graphs.empty()) mean /= static_cast<double>(data.graphs.size());
  std::cout << "wrote " << data.graphs.size() << " graphs to " << out << " (split " << split_sidecar_path(out).string()
            << "), mean target " << mean << '\n';
  return 0;
}

int cmd_verify(const std::string& suite, std::size_t trials, std::uint64_t seed) {
  echo_config("verify", {{"suite", suite}, {"trials", trials}, {"seed", seed}});
  const auto results = run_suite(suite, {trials, seed});
  std::size_t failed = 0, total = 0;
  for (const SuiteResult& r : results) {
    for (const PropertyResult& p : r.properties) {
      ++total;
      failed += !p.verdict;
      std::cout << (p.verdict ? "PASS " : "FAIL ") << r.suite << '/' << p.property << ": " << p.detail;
      if (p.max_deviation) std::cout << ", max dev " << *p.max_deviation;
      std::cout << '\n' << "  " << p.to_json() << '\n';
    }
  }
  std::cout << "summary: " << (total - failed) << '/' << total << " properties hold" << std::endl;
  return failed == 0 ? 0 : 1;
}

int cmd_compare_gat(std::size_t heads, std::size_t dim, std::size_t nodes, double p, std::size_t trials,
                    std::uint64_t seed, double tol) {
  echo_config("compare-gat",
              {{"heads", heads}, {"dim", dim}, {"nodes", nodes}, {"p", p}, {"trials", trials}, {"seed", seed}, {"tol", tol}});
  Rng rng(seed);
  double worst = 0.0;
  std::size_t passed = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    LayerSpec spec;
    spec.kind = LayerKind::GatDefault;
    spec.d_in = spec.d_out = dim;
    spec.heads = heads;
    Layer layer(spec, rng);
    std::bernoulli_distribution coin(p);
    std::vector<Edge> edges;
    for (std::size_t u = 0; u < nodes; ++u)
      for (std::size_t v = u + 1; v < nodes; ++v)
        if (coin(rng)) edges.emplace_back(u, v);
    const Graph g(nodes, std::move(edges), random_normal(nodes, dim, rng));
    Tape t1, t2;
    const double dev = max_abs_diff(gat_default_forward(t1, layer, g, t1.constant(g.node_features())).value(),
                                    gat_expanding_forward(t2, layer, g, t2.constant(g.node_features())).value());
    worst = std::max(worst, dev);
    passed += dev < tol;
    std::cout << "trial " << t << ": max abs dev " << dev << '\n';
  }
  std::cout << passed << '/' << trials << " trials within " << tol << ", max dev " << worst << std::endl;
  return passed == trials ? 0 : 1;
}

int cmd_train(DataOptions& data_opt, TrainOptions& train_opt, const std::string& model, std::size_t s, bool no_re_sum,
              std::size_t hidden, std::size_t layers, std::size_t heads, std::uint64_t seed, const std::string& csv,
              const std::string& save) {
  TrainConfig config = train_opt.resolve();
  config.seed = seed;
  const LayerKind kind = layer_kind_from_string(model);
  json cfg = train_opt.to_json();
  cfg.update(data_opt.to_json());
  cfg.update(json{{"model", model},
                  {"s", s},
                  {"re_sum", !no_re_sum},
                  {"hidden", hidden},
                  {"layers", layers},
                  {"heads", heads},
                  {"seed", seed},
                  {"csv", csv.empty() ? json(nullptr) : json(csv)},
                  {"save", save.empty() ? json(nullptr) : json(save)}});
  echo_config("train", cfg);

  const Dataset data = data_opt.load();
  if (data.graphs.empty()) throw std::runtime_error("dataset is empty");
  ModelSpec spec =
      make_model_spec(kind, data.graphs.front().feature_width(), hidden, layers, s, !no_re_sum, heads, seed, config.readout);
  if (config.loss == LossKind::CrossEntropy) {
    std::size_t classes = 0;
    for (const Graph& g : data.graphs) classes = std::max(classes, static_cast<std::size_t>(g.target().value_or(0.0)) + 1);
    spec.out_dim = classes;
  }
  spec.seed = seed;
  spec.readout = config.readout;
  const Model initial(spec);
  TrainResult result = train(spec, data, config);
  const Metrics& m = result.metrics;
  for (std::size_t e = 0; e < m.train_loss.size(); ++e)
    std::cout << "epoch " << e << " lr " << step_lr(e, config) << " train_loss " << m.train_loss[e] << " valid_loss "
              << m.valid_loss[e] << '\n';
  std::cout << "parameters " << result.model.parameter_count() << ", best epoch " << m.best_epoch << ", test "
            << (config.loss == LossKind::CrossEntropy ? "accuracy " : "MAE ") << m.test_metric << '\n';
  if (config.loss != LossKind::CrossEntropy)
    std::cout << "constant-predictor test MAE " << constant_predictor_mae(data) << '\n';
  std::cout << "parameters unchanged from init: " << (result.model.same_parameters(initial) ? "yes" : "no") << std::endl;
  if (!csv.empty()) {
    std::ostringstream out;
    write_metrics_csv(out, metrics_rows(model_label(kind, s, !no_re_sum), s, !no_re_sum, seed, m));
    write_text(csv, out.str());
  }
  if (!save.empty()) result.model.save(save);
  return 0;
}

int cmd_ablate(DataOptions& data_opt, TrainOptions& train_opt, std::size_t seeds, std::uint64_t first_seed,
               const std::vector<std::size_t>& s_values, std::size_t width, std::size_t layers, std::size_t threads,
               const std::string& csv, const std::string& summary_csv) {
  AblationConfig config;
  config.train = train_opt.resolve();
  config.seeds.clear();
  for (std::size_t i = 0; i < seeds; ++i) config.seeds.push_back(first_seed + i);
  config.s_values = s_values;
  config.reference_width = width;
  config.num_layers = layers;
  config.threads = threads ? threads : default_thread_count();
  json cfg = train_opt.to_json();
  cfg.update(data_opt.to_json());
  cfg.update(json{{"seeds", config.seeds},
                  {"s_values", s_values},
                  {"width", width},
                  {"layers", layers},
                  {"threads", config.threads},
                  {"csv", csv.empty() ? json(nullptr) : json(csv)},
                  {"summary", summary_csv.empty() ? json(nullptr) : json(summary_csv)}});
  echo_config("ablate", cfg);

  const Dataset data = data_opt.load();
  const AblationResult result = ablation_suite(config, data);
  std::cout << "parameter budget " << result.budget << '\n';
  std::ostringstream summary;
  write_summary_csv(summary, result.summary);
  std::cout << summary.str();
  if (!csv.empty()) {
    std::ostringstream out;
    write_metrics_csv(out, result.rows);
    write_text(csv, out.str());
  }
  if (!summary_csv.empty()) write_text(summary_csv, summary.str());
  return 0;
}

int cmd_analyze_rank(const std::string& checkpoint, DataOptions& data_opt, std::size_t graph, std::size_t layer_index) {
  json cfg = data_opt.to_json();
  cfg.update(json{{"checkpoint", checkpoint}, {"graph", graph}, {"layer", layer_index}});
  echo_config("analyze-rank", cfg);
  Model model = Model::load(checkpoint);
  const Dataset data = data_opt.load();
  if (graph >= data.graphs.size()) throw std::out_of_range("graph index " + std::to_string(graph) + " out of range");
  if (layer_index >= model.layers().size()) throw std::out_of_range("layer index out of range");
  const Graph& g = data.graphs[graph];
  const Matrix input = layer_index == 0 ? g.node_features() : model.hidden_states(g)[layer_index - 1];
  const Layer& layer = model.layers()[layer_index];
  const LayerKind kind = layer.spec().kind;
  std::vector<NodeCoefficients> coeffs;
  if (kind == LayerKind::Gcn || kind == LayerKind::Gin0) {
    coeffs = scalar_coefficients(kind, g, input);
  } else if (kind == LayerKind::GatDefault || kind == LayerKind::GatExpanding) {
    throw std::runtime_error("analyze-rank: attention layers have no stored coefficient generator; use compare-gat");
  } else {
    coeffs = expc_coefficients(layer, g, input);
  }
  std::cout << "layer " << layer_index << " (" << to_string(kind) << "), graph " << graph << ": node rank_M rank_H rank_MH\n";
  for (std::size_t v = 0; v < coeffs.size(); ++v) {
    const RankReport r = rank_preservation_report(AggCoeffMatrix(coeffs[v].coefficients), coeffs[v].features);
    std::cout << v << ' ' << r.rank_m << ' ' << r.rank_h << ' ' << r.rank_mh << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agglab: aggregation-strength laboratory for graph neural networks"};
  app.require_subcommand(1);

  std::string gd_kind = "er-triangles", gd_out;
  std::size_t gd_count = 500, gd_nodes = 10;
  double gd_p = 0.3;
  std::uint64_t gd_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--kind", gd_kind)->check(CLI::IsMember({"er-triangles", "regular-pair"}));
  gen->add_option("--count", gd_count);
  gen->add_option("--nodes", gd_nodes)->check(CLI::PositiveNumber);
  gen->add_option("--p", gd_p)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", gd_seed);
  gen->add_option("--out", gd_out)->required();

  std::string v_suite = "all";
  std::size_t v_trials = 20;
  std::uint64_t v_seed = 0;
  auto* ver = app.add_subcommand("verify", "Run property suites");
  std::vector<std::string> suites = suite_names();
  suites.push_back("all");
  ver->add_option("--suite", v_suite)->check(CLI::IsMember(suites));
  ver->add_option("--trials", v_trials)->check(CLI::PositiveNumber);
  ver->add_option("--seed", v_seed);

  std::size_t g_heads = 4, g_dim = 8, g_nodes = 10, g_trials = 20;
  double g_p = 0.3, g_tol = 1e-10;
  std::uint64_t g_seed = 0;
  auto* gat = app.add_subcommand("compare-gat", "Compare the two GAT forward routes");
  gat->add_option("--heads", g_heads)->check(CLI::PositiveNumber);
  gat->add_option("--dim", g_dim)->check(CLI::PositiveNumber);
  gat->add_option("--nodes", g_nodes)->check(CLI::PositiveNumber);
  gat->add_option("--p", g_p)->check(CLI::Range(0.0, 1.0));
  gat->add_option("--trials", g_trials)->check(CLI::PositiveNumber);
  gat->add_option("--seed", g_seed);
  gat->add_option("--tol", g_tol);

  DataOptions t_data;
  TrainOptions t_train;
  std::string t_model = "expc", t_csv, t_save;
  std::size_t t_s = 1, t_hidden = 16, t_layers = 3, t_heads = 1;
  bool t_no_re_sum = false;
  std::uint64_t t_seed = 0;
  auto* tr = app.add_subcommand("train", "Train one model");
  t_data.add_to(*tr);
  t_train.add_to(*tr);
  std::vector<std::string> kinds;
  for (LayerKind k : all_layer_kinds()) kinds.push_back(to_string(k));
  tr->add_option("--model", t_model)->check(CLI::IsMember(kinds));
  tr->add_option("--s", t_s, "Expansion factor")->check(CLI::PositiveNumber);
  tr->add_flag("--no-re-sum", t_no_re_sum, "Sum expanded messages before a single MLP");
  tr->add_option("--hidden", t_hidden)->check(CLI::PositiveNumber);
  tr->add_option("--layers", t_layers)->check(CLI::PositiveNumber);
  tr->add_option("--heads", t_heads)->check(CLI::PositiveNumber);
  tr->add_option("--seed", t_seed);
  tr->add_option("--csv", t_csv, "Per-epoch metrics CSV");
  tr->add_option("--save", t_save, "Checkpoint manifest path (.json; blob written next to it)");

  DataOptions a_data;
  TrainOptions a_train;
  a_train.config = default_ablation_train_config();
  std::size_t a_seeds = 5, a_width = 16, a_layers = 3, a_threads = 0;
  std::uint64_t a_first = 0;
  std::vector<std::size_t> a_s = {4};
  std::string a_csv, a_summary;
  auto* ab = app.add_subcommand("ablate", "Budget-matched ablation over models and seeds");
  a_data.add_to(*ab);
  a_train.add_to(*ab);
  ab->add_option("--seeds", a_seeds, "Number of seeds")->check(CLI::Range(3, 1000));
  ab->add_option("--first-seed", a_first);
  ab->add_option("--s-values", a_s, "Expansion factors besides 1")->delimiter(',');
  ab->add_option("--width", a_width, "Width of the largest-s ExpC model, which sets the budget")->check(CLI::PositiveNumber);
  ab->add_option("--layers", a_layers)->check(CLI::PositiveNumber);
  ab->add_option("--threads", a_threads, "Worker threads (default AGGLAB_THREADS or all cores)");
  ab->add_option("--csv", a_csv, "Per-epoch metrics CSV");
  ab->add_option("--summary", a_summary, "Summary CSV");

  std::string r_ckpt;
  DataOptions r_data;
  std::size_t r_graph = 0, r_layer = 0;
  auto* rk = app.add_subcommand("analyze-rank", "Per-node coefficient rank report of a checkpoint");
  rk->add_option("--checkpoint", r_ckpt)->required();
  r_data.add_to(*rk);
  rk->add_option("--graph", r_graph, "Graph index in the dataset");
  rk->add_option("--layer", r_layer, "Layer index");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(gd_kind, gd_count, gd_nodes, gd_p, gd_seed, gd_out);
    if (*ver) return cmd_verify(v_suite, v_trials, v_seed);
    if (*gat) return cmd_compare_gat(g_heads, g_dim, g_nodes, g_p, g_trials, g_seed, g_tol);
    if (*tr)
      return cmd_train(t_data, t_train, t_model, t_s, t_no_re_sum, t_hidden, t_layers, t_heads, t_seed, t_csv, t_save);
    if (*ab)
      return cmd_ablate(a_data, a_train, a_seeds, a_first, a_s, a_width, a_layers, a_threads, a_csv, a_summary);
    if (*rk) return cmd_analyze_rank(r_ckpt, r_data, r_graph, r_layer);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 1;
}
