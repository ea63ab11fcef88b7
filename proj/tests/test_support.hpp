#pragma once

#include <random>

#include "agglab/graph.hpp"
#include "agglab/random.hpp"

namespace agglab::testing {

// G(n, p) with Gaussian node features of the given width.
inline Graph random_graph(std::size_t n, double p, std::size_t width, Rng& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (coin(rng)) edges.emplace_back(u, v);
  return Graph(n, std::move(edges), random_normal(n, width, rng));
}

inline Graph triangle_graph() { return Graph::structural(3, {{0, 1}, {1, 2}, {0, 2}}); }

}  // namespace agglab::testing
