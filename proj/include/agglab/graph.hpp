#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "agglab/tensor.hpp"

namespace agglab {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Directed message list for one graph: entry e sends from sources[e] to
/// centers[e]. Every node sends to itself. Sorted by (center, source).
struct MessageIndex {
  std::vector<std::size_t> centers;
  std::vector<std::size_t> sources;
  /// |N(v)| including v.
  std::vector<double> neighborhood_size;
};

/// Undirected simple graph with per-node features. Immutable after construction.
class Graph {
 public:
  Graph() = default;
  /// Edges are canonicalized to (min, max) and deduplicated. Throws
  /// std::invalid_argument on self-loops, out-of-range endpoints, or a feature
  /// matrix whose row count is not num_nodes.
  Graph(std::size_t num_nodes, std::vector<Edge> edges, Matrix node_features, std::optional<double> target = {});

  /// Graph with constant feature [1.0] on every node.
  static Graph structural(std::size_t num_nodes, std::vector<Edge> edges, std::optional<double> target = {});

  std::size_t num_nodes() const { return num_nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const Matrix& node_features() const { return features_; }
  std::size_t feature_width() const { return features_.cols; }
  const std::optional<double>& target() const { return target_; }
  std::size_t degree(std::size_t v) const;
  bool has_edge(std::size_t u, std::size_t v) const;
  const std::vector<std::size_t>& adjacency(std::size_t v) const { return adjacency_.at(v); }
  const MessageIndex& messages() const { return messages_; }

  Graph with_features(Matrix features) const;
  Graph with_target(std::optional<double> target) const;

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.num_nodes_ == b.num_nodes_ && a.edges_ == b.edges_ && a.features_ == b.features_ && a.target_ == b.target_;
  }

 private:
  std::size_t num_nodes_ = 0;
  std::vector<Edge> edges_;
  Matrix features_;
  std::optional<double> target_;
  std::vector<std::vector<std::size_t>> adjacency_;
  MessageIndex messages_;
};

/// Sorted neighbors of v including v itself.
std::vector<std::size_t> neighborhood(const Graph& g, std::size_t v);

/// Node i of `g` becomes node perm[i]. Throws std::invalid_argument unless perm is a bijection.
Graph relabel(const Graph& g, std::span<const std::size_t> perm);

/// Exact triangle count by enumerating all node triples.
std::size_t count_triangles(const Graph& g);

/// Brute-force isomorphism over all n! relabelings (structure only).
bool is_isomorphic_bruteforce(const Graph& a, const Graph& b);

/// Sorted 1-WL color multiset after `rounds` refinements from uniform colors.
/// Colors are canonical across graphs refined together, so equal histograms
/// mean 1-WL does not separate the graphs.
std::vector<std::vector<std::size_t>> wl_color_histograms(std::span<const Graph> graphs, std::size_t rounds);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
  friend bool operator==(const Split&, const Split&) = default;
};

struct DatasetMetadata {
  std::string generator;
  std::uint64_t seed = 0;
  std::map<std::string, double> parameters;
  friend bool operator==(const DatasetMetadata&, const DatasetMetadata&) = default;
};

struct Dataset {
  std::vector<Graph> graphs;
  Split split;
  DatasetMetadata metadata;

  /// Throws std::invalid_argument when splits overlap or do not cover every index.
  void validate() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Path of the split sidecar written next to a dataset file.
std::filesystem::path split_sidecar_path(const std::filesystem::path& dataset_path);

/// Writes one JSON object per line plus the split sidecar.
void save_graphs(const Dataset& dataset, const std::filesystem::path& path);
/// Reads a JSON-lines dataset. A missing sidecar puts every graph in train.
/// Throws ParseError naming the offending line.
Dataset load_graphs(const std::filesystem::path& path);

/// Deterministic 80/10/10 split of `count` indices.
Split make_split(std::size_t count, std::uint64_t seed);

/// Erdos-Renyi graphs with constant feature [1.0] and triangle-count targets.
/// Throws std::invalid_argument unless 0 <= p <= 1.
Dataset gen_er_triangle_dataset(std::size_t count, std::size_t n_nodes, double p, std::uint64_t seed);

/// K_{3,3} and the triangular prism: 3-regular, non-isomorphic, 1-WL-equivalent.
std::pair<Graph, Graph> gen_regular_pair();
Dataset regular_pair_dataset();

}  // namespace agglab
