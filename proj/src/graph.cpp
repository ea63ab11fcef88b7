#include "agglab/graph.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "agglab/random.hpp"

namespace agglab {

using nlohmann::json;

Graph::Graph(std::size_t num_nodes, std::vector<Edge> edges, Matrix node_features, std::optional<double> target)
    : num_nodes_(num_nodes), features_(std::move(node_features)), target_(target) {
  if (features_.rows != num_nodes_) {
    throw std::invalid_argument("Graph: " + std::to_string(features_.rows) + " feature rows for " +
                                std::to_string(num_nodes_) + " nodes");
  }
  for (auto& [u, v] : edges) {
    if (u >= num_nodes_ || v >= num_nodes_) {
      throw std::invalid_argument("Graph: edge [" + std::to_string(u) + "," + std::to_string(v) + "] out of range for " +
                                  std::to_string(num_nodes_) + " nodes");
    }
    if (u == v) throw std::invalid_argument("Graph: self-loop on node " + std::to_string(u));
    if (u > v) std::swap(u, v);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);

  adjacency_.assign(num_nodes_, {});
  for (const auto& [u, v] : edges_) {
    adjacency_[u].push_back(v);
    adjacency_[v].push_back(u);
  }
  for (auto& adj : adjacency_) std::sort(adj.begin(), adj.end());

  for (std::size_t v = 0; v < num_nodes_; ++v) {
    const auto nbrs = neighborhood(*this, v);
    for (std::size_t u : nbrs) {
      messages_.centers.push_back(v);
      messages_.sources.push_back(u);
    }
    messages_.neighborhood_size.push_back(static_cast<double>(nbrs.size()));
  }
}

Graph Graph::structural(std::size_t num_nodes, std::vector<Edge> edges, std::optional<double> target) {
  return Graph(num_nodes, std::move(edges), Matrix(num_nodes, 1, 1.0), target);
}

std::size_t Graph::degree(std::size_t v) const { return adjacency_.at(v).size(); }

bool Graph::has_edge(std::size_t u, std::size_t v) const {
  const auto& adj = adjacency_.at(u);
  return std::binary_search(adj.begin(), adj.end(), v);
}

Graph Graph::with_features(Matrix features) const { return Graph(num_nodes_, edges_, std::move(features), target_); }
Graph Graph::with_target(std::optional<double> target) const { return Graph(num_nodes_, edges_, features_, target); }

std::vector<std::size_t> neighborhood(const Graph& g, std::size_t v) {
  if (v >= g.num_nodes()) {
    throw std::out_of_range("neighborhood: node " + std::to_string(v) + " not in graph with " +
                            std::to_string(g.num_nodes()) + " nodes");
  }
  std::vector<std::size_t> out = g.adjacency(v);
  out.insert(std::lower_bound(out.begin(), out.end(), v), v);
  return out;
}

Graph relabel(const Graph& g, std::span<const std::size_t> perm) {
  const std::size_t n = g.num_nodes();
  if (perm.size() != n) throw std::invalid_argument("relabel: permutation has wrong length");
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) throw std::invalid_argument("relabel: not a bijection");
    seen[p] = true;
  }
  std::vector<Edge> edges;
  edges.reserve(g.edges().size());
  for (const auto& [u, v] : g.edges()) edges.emplace_back(perm[u], perm[v]);
  const Matrix& f = g.node_features();
  Matrix features(n, f.cols);
  for (std::size_t i = 0; i < n; ++i) std::copy(f.row(i).begin(), f.row(i).end(), features.row(perm[i]).begin());
  return Graph(n, std::move(edges), std::move(features), g.target());
}

std::size_t count_triangles(const Graph& g) {
  const std::size_t n = g.num_nodes();
  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
  for (const auto& [u, v] : g.edges()) adj[u][v] = adj[v][u] = true;
  std::size_t count = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (adj[a][b])
        for (std::size_t c = b + 1; c < n; ++c)
          if (adj[a][c] && adj[b][c]) ++count;
  return count;
}

bool is_isomorphic_bruteforce(const Graph& a, const Graph& b) {
  if (a.num_nodes() != b.num_nodes() || a.edges().size() != b.edges().size()) return false;
  std::vector<std::size_t> perm(a.num_nodes());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    bool ok = true;
    for (const auto& [u, v] : a.edges()) {
      if (!b.has_edge(perm[u], perm[v])) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

std::vector<std::vector<std::size_t>> wl_color_histograms(std::span<const Graph> graphs, std::size_t rounds) {
  std::vector<std::vector<std::size_t>> colors;
  for (const Graph& g : graphs) colors.emplace_back(g.num_nodes(), 0);
  for (std::size_t r = 0; r < rounds; ++r) {
    // Signatures are shared across graphs so the new color ids stay comparable.
    std::map<std::pair<std::size_t, std::vector<std::size_t>>, std::size_t> palette;
    std::vector<std::vector<std::size_t>> next(graphs.size());
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      const Graph& g = graphs[gi];
      for (std::size_t v = 0; v < g.num_nodes(); ++v) {
        std::vector<std::size_t> nbr;
        for (std::size_t u : g.adjacency(v)) nbr.push_back(colors[gi][u]);
        std::sort(nbr.begin(), nbr.end());
        auto key = std::make_pair(colors[gi][v], std::move(nbr));
        auto it = palette.try_emplace(std::move(key), palette.size()).first;
        next[gi].push_back(it->second);
      }
    }
    colors = std::move(next);
  }
  for (auto& c : colors) std::sort(c.begin(), c.end());
  return colors;
}

void Dataset::validate() const {
  std::vector<int> owner(graphs.size(), 0);
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (std::size_t i : *part) {
      if (i >= graphs.size()) throw std::invalid_argument("Dataset: split index " + std::to_string(i) + " out of range");
      if (owner[i]++ != 0) throw std::invalid_argument("Dataset: index " + std::to_string(i) + " in several splits");
    }
  }
  for (std::size_t i = 0; i < owner.size(); ++i)
    if (owner[i] == 0) throw std::invalid_argument("Dataset: index " + std::to_string(i) + " not in any split");
}

std::filesystem::path split_sidecar_path(const std::filesystem::path& dataset_path) {
  return dataset_path.string() + ".split.json";
}

namespace {

json graph_to_json(const Graph& g) {
  json edges = json::array();
  for (const auto& [u, v] : g.edges()) edges.push_back({u, v});
  json features = json::array();
  const Matrix& f = g.node_features();
  for (std::size_t r = 0; r < f.rows; ++r) features.push_back(std::vector<double>(f.row(r).begin(), f.row(r).end()));
  json out = {{"num_nodes", g.num_nodes()}, {"edges", std::move(edges)}, {"node_features", std::move(features)}};
  out["target"] = g.target() ? json(*g.target()) : json(nullptr);
  return out;
}

Graph graph_from_json(const json& j, std::size_t line) {
  try {
    if (!j.is_object()) throw ParseError("expected a JSON object", line);
    const std::size_t n = j.at("num_nodes").get<std::size_t>();
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw ParseError("edge must be a pair [u, v]", line);
      const long u = e[0].get<long>(), v = e[1].get<long>();
      if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n || static_cast<std::size_t>(v) >= n) {
        throw ParseError("edge [" + std::to_string(u) + "," + std::to_string(v) + "] out of range for " +
                             std::to_string(n) + " nodes",
                         line);
      }
      edges.emplace_back(static_cast<std::size_t>(u), static_cast<std::size_t>(v));
    }
    const auto& rows = j.at("node_features");
    if (rows.size() != n) throw ParseError("node_features has " + std::to_string(rows.size()) + " rows", line);
    std::vector<std::vector<double>> feats;
    for (const auto& r : rows) {
      feats.push_back(r.get<std::vector<double>>());
      if (feats.back().size() != feats.front().size()) throw ParseError("ragged node_features widths", line);
    }
    Matrix features = n == 0 ? Matrix(0, 1) : Matrix::from_rows(feats);
    std::optional<double> target;
    if (j.contains("target") && !j.at("target").is_null()) target = j.at("target").get<double>();
    return Graph(n, std::move(edges), std::move(features), target);
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(e.what(), line);
  }
}

}  // namespace

void save_graphs(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_graphs: cannot open " + path.string());
  for (const Graph& g : dataset.graphs) out << graph_to_json(g).dump() << '\n';
  json side = {{"train", dataset.split.train}, {"valid", dataset.split.valid}, {"test", dataset.split.test}};
  side["metadata"] = {{"generator", dataset.metadata.generator},
                      {"seed", dataset.metadata.seed},
                      {"parameters", dataset.metadata.parameters}};
  std::ofstream sidecar(split_sidecar_path(path), std::ios::binary);
  if (!sidecar) throw std::runtime_error("save_graphs: cannot open split sidecar for " + path.string());
  sidecar << side.dump() << '\n';
}

Dataset load_graphs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_graphs: cannot open " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    ds.graphs.push_back(graph_from_json(j, lineno));
  }
  const auto sidecar = split_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    std::ifstream sin(sidecar);
    json side;
    try {
      side = json::parse(sin);
      ds.split.train = side.at("train").get<std::vector<std::size_t>>();
      ds.split.valid = side.at("valid").get<std::vector<std::size_t>>();
      ds.split.test = side.at("test").get<std::vector<std::size_t>>();
      if (side.contains("metadata")) {
        const auto& m = side["metadata"];
        ds.metadata.generator = m.value("generator", "");
        ds.metadata.seed = m.value("seed", std::uint64_t{0});
        ds.metadata.parameters = m.value("parameters", std::map<std::string, double>{});
      }
    } catch (const std::exception& e) {
      throw ParseError(std::string("split sidecar: ") + e.what(), 1);
    }
  } else {
    ds.split.train.resize(ds.graphs.size());
    std::iota(ds.split.train.begin(), ds.split.train.end(), 0);
  }
  ds.validate();
  return ds;
}

Split make_split(std::size_t count, std::uint64_t seed) {
  Rng rng(seed ^ 0x5eedULL);
  std::vector<std::size_t> order = random_permutation(count, rng);
  const std::size_t n_train = count * 8 / 10;
  const std::size_t n_valid = count / 10;
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  s.valid.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_valid));
  s.test.assign(order.begin() + static_cast<long>(n_train + n_valid), order.end());
  for (auto* part : {&s.train, &s.valid, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

Dataset gen_er_triangle_dataset(std::size_t count, std::size_t n_nodes, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("gen_er_triangle_dataset: p must lie in [0, 1]");
  Rng rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Dataset ds;
  ds.graphs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<Edge> edges;
    for (std::size_t u = 0; u < n_nodes; ++u)
      for (std::size_t v = u + 1; v < n_nodes; ++v)
        if (coin(rng) < p) edges.emplace_back(u, v);
    Graph g = Graph::structural(n_nodes, std::move(edges));
    const double t = static_cast<double>(count_triangles(g));
    ds.graphs.push_back(g.with_target(t));
  }
  ds.split = make_split(count, seed);
  ds.metadata = {"er-triangles",
                 seed,
                 {{"count", static_cast<double>(count)}, {"nodes", static_cast<double>(n_nodes)}, {"p", p}}};
  return ds;
}

std::pair<Graph, Graph> gen_regular_pair() {
  std::vector<Edge> k33;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 3; b < 6; ++b) k33.emplace_back(a, b);
  // Two triangles {0,1,2}, {3,4,5} joined by a perfect matching.
  std::vector<Edge> prism = {{0, 1}, {1, 2}, {0, 2}, {3, 4}, {4, 5}, {3, 5}, {0, 3}, {1, 4}, {2, 5}};
  Graph a = Graph::structural(6, std::move(k33));
  Graph b = Graph::structural(6, std::move(prism));
  a = a.with_target(static_cast<double>(count_triangles(a)));
  b = b.with_target(static_cast<double>(count_triangles(b)));
  return {std::move(a), std::move(b)};
}

Dataset regular_pair_dataset() {
  auto [a, b] = gen_regular_pair();
  Dataset ds;
  ds.graphs = {std::move(a), std::move(b)};
  ds.split.train = {0, 1};
  ds.metadata.generator = "regular-pair";
  return ds;
}

}  // namespace agglab
