#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "agglab/layers.hpp"
#include "test_support.hpp"

using namespace agglab;
using agglab::testing::random_graph;
using agglab::testing::triangle_graph;

namespace {

// Naive per-node reference implementations written straight from the layer
// definitions, sharing no code with the batched tape forward passes.

std::vector<double> row_of(const Matrix& m, std::size_t r) { return {m.row(r).begin(), m.row(r).end()}; }

std::vector<double> affine(const Matrix& w, const Matrix& b, const std::vector<double>& x) {
  std::vector<double> y(w.rows);
  for (std::size_t i = 0; i < w.rows; ++i) {
    y[i] = b(i, 0);
    for (std::size_t j = 0; j < w.cols; ++j) y[i] += w(i, j) * x[j];
  }
  return y;
}

std::vector<double> relu_vec(std::vector<double> x) {
  for (double& v : x) v = std::max(v, 0.0);
  return x;
}

std::vector<double> naive_mlp(const Layer& layer, std::vector<double> x) {
  for (std::size_t k = 0; k < layer.spec().mlp_depth; ++k) {
    const std::string p = "mlp." + std::to_string(k);
    x = relu_vec(affine(layer.parameter(p + ".W").value, layer.parameter(p + ".b").value, x));
  }
  return x;
}

Matrix naive_expc(const Layer& layer, const Graph& g, const Matrix& h) {
  const LayerSpec& spec = layer.spec();
  const std::size_t d = spec.d_in, s = spec.s;
  Matrix out(g.num_nodes(), spec.d_out);
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const auto nbrs = neighborhood(g, v);
    std::vector<double> total(spec.d_out, 0.0), summed(spec.coefficient_rows() * d, 0.0);
    for (std::size_t u : nbrs) {
      std::vector<double> cat = row_of(h, v);
      const auto hu = row_of(h, u);
      cat.insert(cat.end(), hu.begin(), hu.end());
      std::vector<double> m = affine(layer.parameter("coef.W").value, layer.parameter("coef.b").value, cat);
      for (double& x : m) x = std::tanh(x);
      if (spec.kind == LayerKind::ExpCMultiAgg) {
        m.push_back(1.0);
        if (spec.append == AppendRows::OneAndInvDegree) m.push_back(1.0 / static_cast<double>(nbrs.size()));
      }
      std::vector<double> vec;
      if (spec.kind == LayerKind::CombC) {
        for (std::size_t j = 0; j < d; ++j) vec.push_back(m[j] * hu[j]);
      } else {
        vec.resize(m.size() * d);
        for (std::size_t j = 0; j < d; ++j)
          for (std::size_t q = 0; q < m.size(); ++q) vec[j * m.size() + q] = m[q] * hu[j];
      }
      if (spec.re_sum) {
        const auto y = naive_mlp(layer, vec);
        for (std::size_t i = 0; i < y.size(); ++i) total[i] += y[i];
      } else {
        summed.resize(vec.size());
        for (std::size_t i = 0; i < vec.size(); ++i) summed[i] += vec[i];
      }
    }
    if (!spec.re_sum) total = naive_mlp(layer, summed);
    for (std::size_t i = 0; i < spec.d_out; ++i) out(v, i) = total[i];
    (void)s;
  }
  return out;
}

Matrix naive_gat(const Layer& layer, const Graph& g, const Matrix& h) {
  const std::size_t heads = layer.spec().heads, d = layer.spec().d_out, din = layer.spec().d_in;
  const Matrix& w = layer.parameter("W").value;
  const Matrix& a_src = layer.parameter("a_src").value;
  const Matrix& a_dst = layer.parameter("a_dst").value;
  Matrix out(g.num_nodes(), d);
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const auto nbrs = neighborhood(g, v);
    for (std::size_t k = 0; k < heads; ++k) {
      auto project = [&](std::size_t u) {
        std::vector<double> z(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < din; ++j) z[i] += w(k * d + i, j) * h(u, j);
        return z;
      };
      const auto zv = project(v);
      std::vector<double> logits;
      for (std::size_t u : nbrs) {
        const auto zu = project(u);
        double e = 0.0;
        for (std::size_t i = 0; i < d; ++i) e += a_src(k, i) * zv[i] + a_dst(k, i) * zu[i];
        logits.push_back(e > 0 ? e : 0.2 * e);
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& e : logits) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < nbrs.size(); ++c) {
        const auto zu = project(nbrs[c]);
        for (std::size_t i = 0; i < d; ++i) out(v, i) += logits[c] / z * zu[i] / static_cast<double>(heads);
      }
    }
    for (std::size_t i = 0; i < d; ++i) out(v, i) = std::max(out(v, i), 0.0);
  }
  return out;
}

Matrix run(Layer& layer, const Graph& g, const Matrix& h, const ForwardOptions& opt = {}) {
  Tape tape;
  return layer.forward(tape, g, tape.constant(h), opt).value();
}

Layer make_layer(LayerKind kind, std::size_t din, std::size_t dout, Rng& rng, std::size_t s = 2, bool re_sum = true,
                 std::size_t heads = 2, std::size_t depth = 2, AppendRows append = AppendRows::One) {
  LayerSpec spec;
  spec.kind = kind;
  spec.d_in = din;
  spec.d_out = dout;
  spec.s = s;
  spec.re_sum = re_sum;
  spec.heads = heads;
  spec.mlp_depth = kind == LayerKind::ExpCThreeStage ? 1 : depth;
  spec.append = append;
  return Layer(spec, rng);
}

Matrix ones_matrix(std::size_t r, std::size_t c) { return Matrix(r, c, 1.0); }

void set_identity_mlp(Layer& layer) {
  for (std::size_t k = 0; k < layer.spec().mlp_depth; ++k) {
    auto& w = layer.parameter("mlp." + std::to_string(k) + ".W").value;
    w = Matrix(w.rows, w.cols);
    for (std::size_t i = 0; i < std::min(w.rows, w.cols); ++i) w(i, i) = 1.0;
    auto& b = layer.parameter("mlp." + std::to_string(k) + ".b").value;
    b = Matrix(b.rows, 1);
  }
}

}  // namespace

TEST(LayerSpec, ValidatesSettings) {
  LayerSpec spec;
  spec.kind = LayerKind::ExpCThreeStage;
  spec.mlp_depth = 2;
  EXPECT_THROW(spec.validate(), ContractError);
  spec.mlp_depth = 1;
  EXPECT_NO_THROW(spec.validate());
  spec.s = 0;
  EXPECT_THROW(spec.validate(), ContractError);
  EXPECT_EQ(layer_kind_from_string("gat-expanding"), LayerKind::GatExpanding);
  EXPECT_THROW(layer_kind_from_string("sage"), std::invalid_argument);
}

TEST(LayerSpec, ParameterShapes) {
  Rng rng(1);
  Layer expc = make_layer(LayerKind::ExpC, 3, 5, rng, 4);
  EXPECT_EQ(expc.parameter("coef.W").value.rows, 4u);
  EXPECT_EQ(expc.parameter("coef.W").value.cols, 6u);
  EXPECT_EQ(expc.parameter("coef.b").value.rows, 4u);
  EXPECT_EQ(expc.parameter("mlp.0.W").value.cols, 12u);
  EXPECT_EQ(expc.parameter("mlp.1.W").value.rows, 5u);
  Layer comb = make_layer(LayerKind::CombC, 3, 5, rng);
  EXPECT_EQ(comb.parameter("coef.W").value.rows, 3u);
  EXPECT_EQ(comb.parameter("mlp.0.W").value.cols, 3u);
  Layer multi = make_layer(LayerKind::ExpCMultiAgg, 3, 5, rng, 2, true, 1, 2, AppendRows::OneAndInvDegree);
  EXPECT_EQ(multi.spec().coefficient_rows(), 4u);
  EXPECT_EQ(multi.parameter("mlp.0.W").value.cols, 12u);
  // d = 16, s = 4: 2sd + s + (sd)d + d + d^2 + d.
  Layer sized = make_layer(LayerKind::ExpC, 16, 16, rng, 4);
  EXPECT_EQ(sized.parameter_count(), 2u * 4 * 16 + 4 + 64 * 16 + 16 + 16 * 16 + 16);
  EXPECT_THROW(sized.parameter("nope"), std::out_of_range);
}

TEST(Gcn, IsolatedNodeIsReluOfFeature) {
  Rng rng(2);
  Layer layer = make_layer(LayerKind::Gcn, 2, 2, rng);
  layer.parameter("W").value = Matrix::identity(2);
  layer.parameter("b").value = Matrix(2, 1);
  Graph g(1, {}, Matrix::from_rows({{-1.5, 2.0}}));
  EXPECT_EQ(run(layer, g, g.node_features()), Matrix::from_rows({{0.0, 2.0}}));
}

TEST(Gcn, EdgeWithEqualFeatures) {
  Rng rng(3);
  Layer layer = make_layer(LayerKind::Gcn, 2, 2, rng);
  layer.parameter("W").value = Matrix::identity(2);
  layer.parameter("b").value = Matrix(2, 1);
  Graph g(2, {{0, 1}}, Matrix::from_rows({{0.7, -0.3}, {0.7, -0.3}}));
  const Matrix out = run(layer, g, g.node_features());
  for (std::size_t v = 0; v < 2; ++v) {
    EXPECT_NEAR(out(v, 0), 0.7, 1e-15);
    EXPECT_EQ(out(v, 1), 0.0);
  }
}

TEST(Gcn, MatchesDenseNormalizedAdjacency) {
  Rng rng(4);
  Layer layer = make_layer(LayerKind::Gcn, 3, 4, rng);
  Graph g = random_graph(7, 0.4, 3, rng);
  Matrix a(7, 7);
  for (std::size_t v = 0; v < 7; ++v) {
    a(v, v) = 1.0;
    for (std::size_t u : g.adjacency(v)) a(v, u) = 1.0;
  }
  for (std::size_t v = 0; v < 7; ++v)
    for (std::size_t u = 0; u < 7; ++u) a(v, u) /= std::sqrt((g.degree(v) + 1.0) * (g.degree(u) + 1.0));
  Matrix ref = matmul(matmul(a, g.node_features()), transpose(layer.parameter("W").value));
  for (std::size_t v = 0; v < 7; ++v)
    for (std::size_t i = 0; i < 4; ++i) ref(v, i) = std::max(ref(v, i) + layer.parameter("b").value(i, 0), 0.0);
  EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), ref), 1e-12);
}

TEST(Gin0, IdentityMlpOnTriangleSumsBasisVectors) {
  Rng rng(5);
  Layer layer = make_layer(LayerKind::Gin0, 3, 3, rng);
  set_identity_mlp(layer);
  Graph g = triangle_graph().with_features(Matrix::identity(3));
  EXPECT_EQ(run(layer, g, g.node_features()), ones_matrix(3, 3));
}

TEST(Gin0, IsolatedNodeIsMlpOfOwnFeature) {
  Rng rng(6);
  Layer layer = make_layer(LayerKind::Gin0, 2, 3, rng);
  Graph g(1, {}, Matrix::from_rows({{0.4, -0.9}}));
  const auto ref = naive_mlp(layer, {0.4, -0.9});
  const Matrix out = run(layer, g, g.node_features());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out(0, i), ref[i], 1e-15);
}

TEST(Gat, SingleNodeAttentionIsOne) {
  Rng rng(7);
  Layer layer = make_layer(LayerKind::GatDefault, 2, 2, rng, 1, true, 3);
  Graph g(1, {}, Matrix::from_rows({{0.5, 1.5}}));
  const Matrix& w = layer.parameter("W").value;
  std::vector<double> ref(2, 0.0);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 2; ++i) ref[i] += (w(k * 2 + i, 0) * 0.5 + w(k * 2 + i, 1) * 1.5) / 3.0;
  const Matrix out = run(layer, g, g.node_features());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out(0, i), std::max(ref[i], 0.0), 1e-14);
}

TEST(Gat, DefaultMatchesNaiveReference) {
  Rng rng(8);
  for (std::size_t heads : {1u, 2u, 4u}) {
    Layer layer = make_layer(LayerKind::GatDefault, 3, 4, rng, 1, true, heads);
    Graph g = random_graph(8, 0.4, 3, rng);
    EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), naive_gat(layer, g, g.node_features())), 1e-12);
  }
}

TEST(Gat, ExpandingFormEqualsDefault) {
  Rng rng(9);
  for (std::size_t heads : {1u, 2u, 4u})
    for (std::size_t d : {4u, 8u})
      for (int trial = 0; trial < 5; ++trial) {
        Layer fwd = make_layer(LayerKind::GatDefault, d, d, rng, 1, true, heads);
        Graph g = random_graph(10, 0.3, d, rng);
        Tape t1, t2;
        const Matrix a = gat_default_forward(t1, fwd, g, t1.constant(g.node_features())).value();
        const Matrix b = gat_expanding_forward(t2, fwd, g, t2.constant(g.node_features())).value();
        EXPECT_LT(max_abs_diff(a, b), 1e-10);
      }
}

TEST(Gat, SplitLogitsEqualConcatenatedLogits) {
  Rng rng(10);
  Layer layer = make_layer(LayerKind::GatDefault, 3, 5, rng, 1, true, 3);
  Graph g = random_graph(6, 0.5, 3, rng);
  EXPECT_LT(max_abs_diff(gat_concat_logits(layer, g, g.node_features()), gat_split_logits(layer, g, g.node_features())),
            1e-12);
}

TEST(Gat, AttentionSumsToOnePerNeighborhood) {
  Rng rng(11);
  Layer layer = make_layer(LayerKind::GatDefault, 3, 3, rng, 1, true, 2);
  Graph g = random_graph(9, 0.4, 3, rng);
  const Matrix logits = gat_concat_logits(layer, g, g.node_features());
  Tape tape;
  const Matrix alpha =
      segment_softmax(leaky_relu(tape.constant(logits)), g.messages().centers, g.num_nodes()).value();
  Matrix sums(g.num_nodes(), 2);
  for (std::size_t e = 0; e < alpha.rows; ++e)
    for (std::size_t k = 0; k < 2; ++k) sums(g.messages().centers[e], k) += alpha(e, k);
  for (double v : sums.data) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(ExpC, MatchesNaiveReference) {
  Rng rng(12);
  for (bool re_sum : {true, false})
    for (std::size_t s : {1u, 3u}) {
      Layer layer = make_layer(LayerKind::ExpC, 3, 4, rng, s, re_sum);
      Graph g = random_graph(7, 0.4, 3, rng);
      EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), naive_expc(layer, g, g.node_features())), 1e-12)
          << "s=" << s << " re_sum=" << re_sum;
    }
}

TEST(ExpC, OnesBypassWithIdentityMlpIsSum) {
  Rng rng(13);
  Layer expc = make_layer(LayerKind::ExpC, 3, 3, rng, 1, true);
  set_identity_mlp(expc);
  Layer gin = make_layer(LayerKind::Gin0, 3, 3, rng);
  set_identity_mlp(gin);
  Graph g = random_graph(8, 0.4, 3, rng);
  Matrix h = g.node_features();
  for (double& v : h.data) v = std::abs(v);  // identity MLP with ReLU is identity on nonnegative input
  EXPECT_LT(max_abs_diff(run(expc, g, h, {CoefficientBypass::Ones}), run(gin, g, h)), 1e-14);
}

TEST(ExpC, IsolatedNodeUsesOnlyItsOwnMessage) {
  Rng rng(14);
  Layer layer = make_layer(LayerKind::ExpC, 2, 3, rng, 2);
  Graph g(1, {}, Matrix::from_rows({{0.3, -0.8}}));
  EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), naive_expc(layer, g, g.node_features())), 1e-14);
}

TEST(CombC, MatchesNaiveReference) {
  Rng rng(15);
  for (bool re_sum : {true, false}) {
    Layer layer = make_layer(LayerKind::CombC, 3, 4, rng, 1, re_sum);
    Graph g = random_graph(7, 0.4, 3, rng);
    EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), naive_expc(layer, g, g.node_features())), 1e-12);
  }
}

TEST(CombC, OnesBypassIsSum) {
  Rng rng(16);
  Layer comb = make_layer(LayerKind::CombC, 3, 3, rng);
  set_identity_mlp(comb);
  Graph g = random_graph(6, 0.5, 3, rng);
  Matrix h = g.node_features();
  for (double& v : h.data) v = std::abs(v);
  Matrix ref(6, 3);
  for (std::size_t v = 0; v < 6; ++v)
    for (std::size_t u : neighborhood(g, v))
      for (std::size_t j = 0; j < 3; ++j) ref(v, j) += h(u, j);
  EXPECT_LT(max_abs_diff(run(comb, g, h, {CoefficientBypass::Ones}), ref), 1e-14);
}

TEST(CombC, ScalarWidthCoincidesWithExpCOfOneRow) {
  Rng rng(17);
  Layer comb = make_layer(LayerKind::CombC, 1, 3, rng);
  Layer expc = make_layer(LayerKind::ExpC, 1, 3, rng, 1);
  for (const Parameter& p : comb.parameters()) expc.parameter(p.name).value = p.value;
  Graph g = random_graph(8, 0.4, 1, rng);
  EXPECT_LT(max_abs_diff(run(comb, g, g.node_features()), run(expc, g, g.node_features())), 1e-14);
}

TEST(ThreeStage, EqualsExpCWithOneLayerMlp) {
  Rng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    Layer expc = make_layer(LayerKind::ExpC, 3, 4, rng, 2, true, 1, 1);
    Graph g = random_graph(8, 0.4, 3, rng);
    const Matrix ref = run(expc, g, g.node_features());
    const ThreeStageResult res = expc_three_stage_forward(expc, g, g.node_features());
    EXPECT_LT(max_abs_diff(res.output, ref), 1e-10);

    // Independent activity pattern from the per-message pre-activations.
    const Matrix h = g.node_features();
    const auto& w = expc.parameter("mlp.0.W").value;
    for (std::size_t v = 0; v < g.num_nodes(); ++v)
      for (std::size_t i = 0; i < 4; ++i) {
        std::vector<std::size_t> expected;
        for (std::size_t u : neighborhood(g, v)) {
          std::vector<double> cat = row_of(h, v);
          const auto hu = row_of(h, u);
          cat.insert(cat.end(), hu.begin(), hu.end());
          auto m = affine(expc.parameter("coef.W").value, expc.parameter("coef.b").value, cat);
          double z = expc.parameter("mlp.0.b").value(i, 0);
          for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t q = 0; q < 2; ++q) z += w(i, j * 2 + q) * std::tanh(m[q]) * hu[j];
          if (z > 0) expected.push_back(u);
        }
        EXPECT_EQ(res.nodes[v].active[i], expected);
      }
  }
}

TEST(ThreeStage, TapeRouteEqualsExpC) {
  Rng rng(19);
  Layer layer = make_layer(LayerKind::ExpCThreeStage, 3, 4, rng, 2);
  Graph g = random_graph(9, 0.4, 3, rng);
  Matrix expc = [&] {
    Tape t;
    return expc_forward(t, layer, g, t.constant(g.node_features())).value();
  }();
  EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), expc), 1e-10);
}

TEST(ThreeStage, AllActiveIsLinearSumPlusCountBias) {
  Rng rng(20);
  Layer layer = make_layer(LayerKind::ExpCThreeStage, 2, 3, rng, 2);
  for (double& b : layer.parameter("mlp.0.b").value.data) b = 100.0;
  Graph g = random_graph(6, 0.5, 2, rng);
  const auto res = expc_three_stage_forward(layer, g, g.node_features());
  for (std::size_t v = 0; v < 6; ++v)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(res.nodes[v].active[i], neighborhood(g, v));
}

TEST(ThreeStage, AllInactiveIsZero) {
  Rng rng(21);
  Layer layer = make_layer(LayerKind::ExpCThreeStage, 2, 3, rng, 2);
  for (double& b : layer.parameter("mlp.0.b").value.data) b = -100.0;
  Graph g = random_graph(6, 0.5, 2, rng);
  const auto res = expc_three_stage_forward(layer, g, g.node_features());
  EXPECT_EQ(res.output, Matrix(6, 3));
  for (const auto& node : res.nodes)
    for (const auto& a : node.active) EXPECT_TRUE(a.empty());
}

TEST(MultiAgg, MatchesNaiveReference) {
  Rng rng(22);
  for (AppendRows append : {AppendRows::One, AppendRows::OneAndInvDegree}) {
    Layer layer = make_layer(LayerKind::ExpCMultiAgg, 3, 4, rng, 2, true, 1, 2, append);
    Graph g = random_graph(7, 0.4, 3, rng);
    EXPECT_LT(max_abs_diff(run(layer, g, g.node_features()), naive_expc(layer, g, g.node_features())), 1e-12);
  }
}

TEST(MultiAgg, ZeroBypassLeavesSumChannel) {
  Rng rng(23);
  Layer layer = make_layer(LayerKind::ExpCMultiAgg, 2, 2, rng, 1, false, 1, 1, AppendRows::OneAndInvDegree);
  Graph g = random_graph(6, 0.5, 2, rng);
  const auto coeffs = expc_coefficients(layer, g, g.node_features(), {CoefficientBypass::Zeros});
  for (std::size_t v = 0; v < 6; ++v) {
    const auto& c = coeffs[v].coefficients;
    ASSERT_EQ(c.rows, 3u);
    for (std::size_t u = 0; u < c.cols; ++u) {
      EXPECT_EQ(c(0, u), 0.0);
      EXPECT_EQ(c(1, u), 1.0);
      EXPECT_DOUBLE_EQ(c(2, u), 1.0 / static_cast<double>(c.cols));
    }
  }
}

TEST(MultiAgg, ConstantRowNeverLowersRank) {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    Layer plain = make_layer(LayerKind::ExpC, 2, 2, rng, 2);
    Layer multi = make_layer(LayerKind::ExpCMultiAgg, 2, 2, rng, 2);
    for (const std::string name : {"coef.W", "coef.b"}) multi.parameter(name).value = plain.parameter(name).value;
    Graph g = random_graph(8, 0.5, 2, rng);
    const auto a = expc_coefficients(plain, g, g.node_features());
    const auto b = expc_coefficients(multi, g, g.node_features());
    for (std::size_t v = 0; v < 8; ++v) EXPECT_GE(numerical_rank(b[v].coefficients), numerical_rank(a[v].coefficients));
  }
}

TEST(Coefficients, ScalarKindsHaveRankOne) {
  Rng rng(25);
  Graph g = random_graph(8, 0.5, 3, rng);
  for (LayerKind kind : {LayerKind::Gcn, LayerKind::Gin0}) {
    for (const auto& nc : scalar_coefficients(kind, g, g.node_features())) {
      EXPECT_EQ(numerical_rank(nc.coefficients), 1u);
      EXPECT_LE(numerical_rank(matmul(nc.coefficients, nc.features)), 1u);
    }
  }
  EXPECT_THROW(scalar_coefficients(LayerKind::ExpC, g, g.node_features()), ContractError);
}

TEST(Readout, WidthsAndModes) {
  Tape tape;
  Var a = tape.constant(Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}}));
  Var b = tape.constant(Matrix(2, 6, 1.0));
  const std::vector<Var> parts = {a, b};
  const Matrix sum = readout(parts, ReadoutMode::Sum).value();
  EXPECT_EQ(sum.cols, 10u);
  EXPECT_EQ(sum(0, 0), 6.0);
  EXPECT_EQ(readout(parts, ReadoutMode::Mean).value()(0, 0), 3.0);
  EXPECT_THROW(readout(std::span<const Var>{}, ReadoutMode::Sum), ContractError);
}

TEST(Readout, SingleNodeSingleLayer) {
  Tape tape;
  Var a = tape.constant(Matrix::from_rows({{0.25, -1.0}}));
  const std::vector<Var> parts = {a};
  EXPECT_EQ(readout(parts, ReadoutMode::Sum).value(), Matrix::from_rows({{0.25, -1.0}}));
}

TEST(Layers, RejectsWrongInputWidth) {
  Rng rng(26);
  for (LayerKind kind : all_layer_kinds()) {
    Layer layer = make_layer(kind, 3, 3, rng);
    Graph g = random_graph(4, 0.5, 2, rng);
    Tape tape;
    EXPECT_THROW(layer.forward(tape, g, tape.constant(g.node_features())), DimensionError) << to_string(kind);
  }
}

TEST(Layers, PermutationEquivariance) {
  Rng rng(27);
  for (LayerKind kind : all_layer_kinds())
    for (int trial = 0; trial < 3; ++trial) {
      Layer layer = make_layer(kind, 3, 4, rng);
      Graph g = random_graph(7, 0.4, 3, rng);
      const auto perm = random_permutation(7, rng);
      Graph pg = relabel(g, perm);
      const Matrix a = run(layer, g, g.node_features());
      const Matrix b = run(layer, pg, pg.node_features());
      for (std::size_t v = 0; v < 7; ++v)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a(v, i), b(perm[v], i), 1e-12) << to_string(kind);
    }
}

TEST(Layers, GradientsMatchFiniteDifferences) {
  Rng rng(28);
  for (LayerKind kind : all_layer_kinds()) {
    Layer layer = make_layer(kind, 3, 3, rng, 2, kind != LayerKind::CombC, 2);
    Graph g = random_graph(6, 0.5, 3, rng);
    std::vector<Parameter*> params;
    for (Parameter& p : layer.parameters()) params.push_back(&p);
    auto loss = [&](Tape& t) {
      Var out = layer.forward(t, g, t.constant(g.node_features()));
      return sum_all(square(out));
    };
    const GradCheckReport report = check_parameter_gradients(loss, params);
    EXPECT_LT(report.max_rel_error, 1e-4) << to_string(kind) << " worst " << report.worst_parameter;
  }
}

TEST(Model, ForwardShapeAndDeterministicInit) {
  const ModelSpec spec = make_model_spec(LayerKind::ExpC, 1, 8, 3, 4, true, 1, 42);
  Model a(spec), b(spec);
  EXPECT_TRUE(a.same_parameters(b));
  Graph g = triangle_graph();
  Tape tape;
  Var out = a.forward(tape, g);
  EXPECT_EQ(out.rows(), 1u);
  EXPECT_EQ(out.cols(), 1u);
  EXPECT_EQ(a.embed(g).cols, 24u);
  Model c(make_model_spec(LayerKind::ExpC, 1, 8, 3, 4, true, 1, 43));
  EXPECT_FALSE(a.same_parameters(c));
}

TEST(Model, InitWithinFanInBound) {
  Model m(make_model_spec(LayerKind::Gin0, 5, 16, 2));
  for (const Parameter* p : m.parameters()) {
    const std::size_t fan = p->name.find(".b") != std::string::npos && p->value.cols == 1 ? 0 : p->value.cols;
    if (fan == 0) continue;
    for (double v : p->value.data) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(static_cast<double>(fan)));
  }
}

TEST(Model, CheckpointRoundTripIsBitwise) {
  const auto dir = std::filesystem::temp_directory_path() / "agglab_ckpt_test";
  std::filesystem::create_directories(dir);
  for (LayerKind kind : all_layer_kinds()) {
    Model m(make_model_spec(kind, 2, 5, 2, 3, true, 2, 7, ReadoutMode::Mean));
    const auto path = dir / (to_string(kind) + ".json");
    m.save(path);
    Model loaded = Model::load(path);
    EXPECT_TRUE(loaded.same_parameters(m)) << to_string(kind);
    EXPECT_EQ(loaded.spec(), m.spec());
    Graph g = triangle_graph().with_features(Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}}));
    EXPECT_EQ(loaded.predict(g), m.predict(g));
  }
  std::filesystem::remove_all(dir);
}

TEST(Model, LoadRejectsTruncatedBlob) {
  const auto dir = std::filesystem::temp_directory_path() / "agglab_ckpt_trunc";
  std::filesystem::create_directories(dir);
  Model m(make_model_spec(LayerKind::Gcn, 1, 4, 2));
  m.save(dir / "m.json");
  std::filesystem::resize_file(dir / "m.bin", 16);
  EXPECT_THROW(Model::load(dir / "m.json"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Model, RegularPairReadoutsCoincide) {
  const auto [k33, prism] = gen_regular_pair();
  for (LayerKind kind : all_layer_kinds()) {
    Model m(make_model_spec(kind, 1, 6, 3, 2, true, 2, 5));
    EXPECT_LT(max_abs_diff(m.embed(k33), m.embed(prism)), 1e-10) << to_string(kind);
  }
  EXPECT_EQ(count_triangles(k33), 0u);
  EXPECT_EQ(count_triangles(prism), 2u);
}
