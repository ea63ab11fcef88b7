#include "agglab/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace agglab {

using nlohmann::json;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Gcn: return "gcn";
    case LayerKind::Gin0: return "gin0";
    case LayerKind::GatDefault: return "gat-default";
    case LayerKind::GatExpanding: return "gat-expanding";
    case LayerKind::ExpC: return "expc";
    case LayerKind::CombC: return "combc";
    case LayerKind::ExpCThreeStage: return "expc-three-stage";
    case LayerKind::ExpCMultiAgg: return "expc-multiagg";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : all_layer_kinds())
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

const std::vector<LayerKind>& all_layer_kinds() {
  static const std::vector<LayerKind> kinds = {LayerKind::Gcn,          LayerKind::Gin0,  LayerKind::GatDefault,
                                               LayerKind::GatExpanding, LayerKind::ExpC,  LayerKind::CombC,
                                               LayerKind::ExpCThreeStage, LayerKind::ExpCMultiAgg};
  return kinds;
}

std::string to_string(ReadoutMode mode) { return mode == ReadoutMode::Sum ? "sum" : "mean"; }

ReadoutMode readout_mode_from_string(const std::string& name) {
  if (name == "sum" || name == "SUM") return ReadoutMode::Sum;
  if (name == "mean" || name == "MEAN") return ReadoutMode::Mean;
  throw std::invalid_argument("unknown readout mode '" + name + "'");
}

namespace {

bool is_expc_family(LayerKind k) {
  return k == LayerKind::ExpC || k == LayerKind::ExpCThreeStage || k == LayerKind::ExpCMultiAgg;
}
bool is_gat(LayerKind k) { return k == LayerKind::GatDefault || k == LayerKind::GatExpanding; }

std::size_t appended_rows(AppendRows a) {
  switch (a) {
    case AppendRows::None: return 0;
    case AppendRows::One: return 1;
    case AppendRows::OneAndInvDegree: return 2;
  }
  return 0;
}

Parameter init_param(std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Parameter(std::move(name), random_uniform(rows, cols, rng, -bound, bound));
}

Var linear(Tape& tape, Parameter& w, Parameter& b, Var x) {
  return add_bias(matmul(x, transpose(tape.param(w))), tape.param(b));
}

Var mlp(Tape& tape, Layer& layer, Var x) {
  for (std::size_t k = 0; k < layer.spec().mlp_depth; ++k) {
    const std::string p = "mlp." + std::to_string(k);
    x = relu(linear(tape, layer.parameter(p + ".W"), layer.parameter(p + ".b"), x));
  }
  return x;
}

// Learned (or bypassed) coefficient vectors of every message, E x rows, with
// any constant rows appended.
Var coefficient_matrix(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options) {
  const LayerSpec& spec = layer.spec();
  const MessageIndex& msg = g.messages();
  const std::size_t edges = msg.centers.size();
  const std::size_t learned = spec.kind == LayerKind::CombC ? spec.d_in : spec.s;
  Var m;
  switch (options.bypass) {
    case CoefficientBypass::None: {
      Var pair = concat_cols({gather_rows(h, msg.centers), gather_rows(h, msg.sources)});
      m = tanh(linear(tape, layer.parameter("coef.W"), layer.parameter("coef.b"), pair));
      break;
    }
    case CoefficientBypass::Ones: m = tape.constant(Matrix(edges, learned, 1.0)); break;
    case CoefficientBypass::Zeros: m = tape.constant(Matrix(edges, learned, 0.0)); break;
    case CoefficientBypass::InvDegree: {
      Matrix c(edges, learned);
      for (std::size_t e = 0; e < edges; ++e)
        for (double& v : c.row(e)) v = 1.0 / msg.neighborhood_size[msg.centers[e]];
      m = tape.constant(std::move(c));
      break;
    }
  }
  if (spec.kind != LayerKind::ExpCMultiAgg || spec.append == AppendRows::None) return m;
  std::vector<Var> parts = {m, tape.constant(Matrix(edges, 1, 1.0))};
  if (spec.append == AppendRows::OneAndInvDegree) {
    Matrix inv(edges, 1);
    for (std::size_t e = 0; e < edges; ++e) inv(e, 0) = 1.0 / msg.neighborhood_size[msg.centers[e]];
    parts.push_back(tape.constant(std::move(inv)));
  }
  return concat_cols(parts);
}

// Per-message expanded features vec(m_uv h_u^T), E x rows*d.
Var expanded_messages(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options) {
  Var m = coefficient_matrix(tape, layer, g, h, options);
  return rowwise_outer_vec(m, gather_rows(h, g.messages().sources));
}

Var sum_then_or_after_mlp(Tape& tape, Layer& layer, const Graph& g, Var per_message) {
  const MessageIndex& msg = g.messages();
  if (layer.spec().re_sum) return scatter_add_rows(mlp(tape, layer, per_message), msg.centers, g.num_nodes());
  return mlp(tape, layer, scatter_add_rows(per_message, msg.centers, g.num_nodes()));
}

void require_input(const Layer& layer, const Graph& g, Var h) {
  if (h.rows() != g.num_nodes() || h.cols() != layer.spec().d_in) {
    throw DimensionError(to_string(layer.spec().kind) + ": input " + h.value().shape_string() + " but layer expects [" +
                         std::to_string(g.num_nodes()) + "x" + std::to_string(layer.spec().d_in) + "]");
  }
}

// Index map embedding the K rows of `a` (K x d) block-diagonally into K x K*d.
std::vector<long> block_diag_map(std::size_t heads, std::size_t d) {
  std::vector<long> map(heads * heads * d, -1);
  for (std::size_t k = 0; k < heads; ++k)
    for (std::size_t j = 0; j < d; ++j) map[k * heads * d + k * d + j] = static_cast<long>(k * d + j);
  return map;
}

}  // namespace

void LayerSpec::validate() const {
  if (d_in < 1 || d_out < 1) throw ContractError("LayerSpec: widths must be >= 1");
  if (is_expc_family(kind) && s < 1) throw ContractError("LayerSpec: expansion factor s must be >= 1");
  if (is_gat(kind) && heads < 1) throw ContractError("LayerSpec: head count must be >= 1");
  if (mlp_depth < 1 || mlp_depth > 2) throw ContractError("LayerSpec: mlp_depth must be 1 or 2");
  if (kind == LayerKind::ExpCThreeStage && (mlp_depth != 1 || !re_sum)) {
    throw ContractError("LayerSpec: expc-three-stage requires mlp_depth = 1 and re_sum");
  }
}

std::size_t LayerSpec::coefficient_rows() const {
  if (kind == LayerKind::CombC) return d_in;
  if (kind == LayerKind::ExpCMultiAgg) return s + appended_rows(append);
  return s;
}

Layer::Layer(LayerSpec spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const std::size_t din = spec_.d_in, dout = spec_.d_out;
  auto add_mlp = [&](std::size_t in) {
    for (std::size_t k = 0; k < spec_.mlp_depth; ++k) {
      const std::size_t fan = k == 0 ? in : dout;
      const std::string p = "mlp." + std::to_string(k);
      params_.push_back(init_param(p + ".W", dout, fan, fan, rng));
      params_.push_back(init_param(p + ".b", dout, 1, fan, rng));
    }
  };
  switch (spec_.kind) {
    case LayerKind::Gcn:
      params_.push_back(init_param("W", dout, din, din, rng));
      params_.push_back(init_param("b", dout, 1, din, rng));
      break;
    case LayerKind::Gin0: add_mlp(din); break;
    case LayerKind::GatDefault:
    case LayerKind::GatExpanding:
      params_.push_back(init_param("W", spec_.heads * dout, din, din, rng));
      params_.push_back(init_param("a_src", spec_.heads, dout, 2 * dout, rng));
      params_.push_back(init_param("a_dst", spec_.heads, dout, 2 * dout, rng));
      break;
    case LayerKind::ExpC:
    case LayerKind::ExpCThreeStage:
    case LayerKind::ExpCMultiAgg:
      params_.push_back(init_param("coef.W", spec_.s, 2 * din, 2 * din, rng));
      params_.push_back(init_param("coef.b", spec_.s, 1, 2 * din, rng));
      add_mlp(spec_.coefficient_rows() * din);
      break;
    case LayerKind::CombC:
      params_.push_back(init_param("coef.W", din, 2 * din, 2 * din, rng));
      params_.push_back(init_param("coef.b", din, 1, 2 * din, rng));
      add_mlp(din);
      break;
  }
}

Parameter& Layer::parameter(const std::string& name) {
  for (Parameter& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range(to_string(spec_.kind) + " layer has no parameter '" + name + "'");
}

const Parameter& Layer::parameter(const std::string& name) const {
  return const_cast<Layer*>(this)->parameter(name);
}

std::size_t Layer::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

Var Layer::forward(Tape& tape, const Graph& g, Var h, const ForwardOptions& options) {
  switch (spec_.kind) {
    case LayerKind::Gcn: return gcn_forward(tape, *this, g, h);
    case LayerKind::Gin0: return gin0_forward(tape, *this, g, h);
    case LayerKind::GatDefault: return gat_default_forward(tape, *this, g, h);
    case LayerKind::GatExpanding: return gat_expanding_forward(tape, *this, g, h);
    case LayerKind::ExpC:
    case LayerKind::ExpCMultiAgg: return expc_forward(tape, *this, g, h, options);
    case LayerKind::CombC: return combc_forward(tape, *this, g, h, options);
    case LayerKind::ExpCThreeStage: return expc_three_stage_tape_forward(tape, *this, g, h);
  }
  throw ContractError("Layer::forward: unknown kind");
}

// ---------------------------------------------------------------------------
// Layers

Var gcn_forward(Tape& tape, Layer& layer, const Graph& g, Var h) {
  require_input(layer, g, h);
  const MessageIndex& msg = g.messages();
  std::vector<double> coeff(msg.centers.size());
  for (std::size_t e = 0; e < coeff.size(); ++e) {
    coeff[e] = 1.0 / std::sqrt(msg.neighborhood_size[msg.centers[e]] * msg.neighborhood_size[msg.sources[e]]);
  }
  Var agg = scatter_add_rows(scale_rows(gather_rows(h, msg.sources), coeff), msg.centers, g.num_nodes());
  return relu(linear(tape, layer.parameter("W"), layer.parameter("b"), agg));
}

Var gin0_forward(Tape& tape, Layer& layer, const Graph& g, Var h) {
  require_input(layer, g, h);
  const MessageIndex& msg = g.messages();
  return mlp(tape, layer, scatter_add_rows(gather_rows(h, msg.sources), msg.centers, g.num_nodes()));
}

Var gat_default_forward(Tape& tape, Layer& layer, const Graph& g, Var h) {
  require_input(layer, g, h);
  const std::size_t heads = layer.spec().heads, d = layer.spec().d_out;
  const MessageIndex& msg = g.messages();
  Var w = tape.param(layer.parameter("W"));
  Var a_src = tape.param(layer.parameter("a_src"));
  Var a_dst = tape.param(layer.parameter("a_dst"));
  Var total;
  for (std::size_t k = 0; k < heads; ++k) {
    Var z = matmul(h, transpose(slice_rows(w, k * d, d)));
    Var a = concat_cols({slice_rows(a_src, k, 1), slice_rows(a_dst, k, 1)});
    Var pair = concat_cols({gather_rows(z, msg.centers), gather_rows(z, msg.sources)});
    Var alpha = segment_softmax(leaky_relu(matmul(pair, transpose(a))), msg.centers, g.num_nodes());
    Var head = scatter_add_rows(rowwise_outer_vec(alpha, gather_rows(z, msg.sources)), msg.centers, g.num_nodes());
    total = k == 0 ? head : add(total, head);
  }
  return relu(scale(total, 1.0 / static_cast<double>(heads)));
}

Var gat_expanding_forward(Tape& tape, Layer& layer, const Graph& g, Var h) {
  require_input(layer, g, h);
  const std::size_t heads = layer.spec().heads, d = layer.spec().d_out, din = layer.spec().d_in;
  const MessageIndex& msg = g.messages();
  Var w = tape.param(layer.parameter("W"));
  const auto diag = block_diag_map(heads, d);
  Var a_left = gather_elements(tape.param(layer.parameter("a_src")), diag, heads, heads * d);
  Var a_right = gather_elements(tape.param(layer.parameter("a_dst")), diag, heads, heads * d);

  Var z = matmul(h, transpose(w));
  Var logits = add(matmul(gather_rows(z, msg.centers), transpose(a_left)),
                   matmul(gather_rows(z, msg.sources), transpose(a_right)));
  Var alpha = segment_softmax(leaky_relu(logits), msg.centers, g.num_nodes());

  // vec(alpha h^T) puts alpha_k h_j at column j*K + k, so the shared matrix
  // is W rearranged to d x (K*din) with the same interleaving.
  std::vector<long> interleave(d * heads * din);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < din; ++j)
      for (std::size_t k = 0; k < heads; ++k)
        interleave[i * heads * din + j * heads + k] = static_cast<long>((k * d + i) * din + j);
  Var shared = gather_elements(w, interleave, d, heads * din);

  Var expanded = rowwise_outer_vec(alpha, gather_rows(h, msg.sources));
  Var summed = scatter_add_rows(expanded, msg.centers, g.num_nodes());
  return relu(scale(matmul(summed, transpose(shared)), 1.0 / static_cast<double>(heads)));
}

Var expc_forward(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options) {
  require_input(layer, g, h);
  return sum_then_or_after_mlp(tape, layer, g, expanded_messages(tape, layer, g, h, options));
}

Var combc_forward(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options) {
  require_input(layer, g, h);
  Var m = coefficient_matrix(tape, layer, g, h, options);
  Var weighted = elementwise_mul(m, gather_rows(h, g.messages().sources));
  return sum_then_or_after_mlp(tape, layer, g, weighted);
}

Var expc_three_stage_tape_forward(Tape& tape, Layer& layer, const Graph& g, Var h) {
  require_input(layer, g, h);
  if (layer.spec().mlp_depth != 1) throw ContractError("three-stage form requires a 1-layer MLP");
  const MessageIndex& msg = g.messages();
  const std::size_t n = g.num_nodes(), dout = layer.spec().d_out;
  Var v = expanded_messages(tape, layer, g, h, {});
  Var w = tape.param(layer.parameter("mlp.0.W"));
  Var b = tape.param(layer.parameter("mlp.0.b"));
  const Matrix pre = add_bias(matmul(v, transpose(w)), b).value();

  std::vector<Var> columns;
  for (std::size_t i = 0; i < dout; ++i) {
    std::vector<double> mask(pre.rows);
    Matrix counts(n, 1);
    for (std::size_t e = 0; e < pre.rows; ++e) {
      mask[e] = pre(e, i) > 0.0 ? 1.0 : 0.0;
      counts(msg.centers[e], 0) += mask[e];
    }
    // Rows of r_i are vec(sum over N_i(v) of m_uv h_u^T).
    Var r = scatter_add_rows(scale_rows(v, mask), msg.centers, n);
    Var y = matmul(r, transpose(slice_rows(w, i, 1)));
    columns.push_back(add(y, matmul(tape.constant(std::move(counts)), slice_rows(b, i, 1))));
  }
  return concat_cols(columns);
}

Matrix gat_concat_logits(const Layer& layer, const Graph& g, const Matrix& h) {
  const std::size_t heads = layer.spec().heads, d = layer.spec().d_out;
  const Matrix& w = layer.parameter("W").value;
  const Matrix& a_src = layer.parameter("a_src").value;
  const Matrix& a_dst = layer.parameter("a_dst").value;
  const MessageIndex& msg = g.messages();
  Matrix out(msg.centers.size(), heads);
  for (std::size_t k = 0; k < heads; ++k) {
    Matrix wk(d, w.cols);
    for (std::size_t i = 0; i < d; ++i) std::copy(w.row(k * d + i).begin(), w.row(k * d + i).end(), wk.row(i).begin());
    const Matrix z = matmul(h, transpose(wk));
    std::vector<double> a(2 * d);
    for (std::size_t j = 0; j < d; ++j) {
      a[j] = a_src(k, j);
      a[d + j] = a_dst(k, j);
    }
    for (std::size_t e = 0; e < msg.centers.size(); ++e) {
      std::vector<double> cat(z.row(msg.centers[e]).begin(), z.row(msg.centers[e]).end());
      cat.insert(cat.end(), z.row(msg.sources[e]).begin(), z.row(msg.sources[e]).end());
      out(e, k) = std::inner_product(a.begin(), a.end(), cat.begin(), 0.0);
    }
  }
  return out;
}

Matrix gat_split_logits(const Layer& layer, const Graph& g, const Matrix& h) {
  const std::size_t heads = layer.spec().heads, d = layer.spec().d_out;
  const Matrix z = matmul(h, transpose(layer.parameter("W").value));
  const Matrix& a_src = layer.parameter("a_src").value;
  const Matrix& a_dst = layer.parameter("a_dst").value;
  const MessageIndex& msg = g.messages();
  Matrix out(msg.centers.size(), heads);
  for (std::size_t e = 0; e < msg.centers.size(); ++e)
    for (std::size_t k = 0; k < heads; ++k) {
      double left = 0.0, right = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        left += a_src(k, j) * z(msg.centers[e], k * d + j);
        right += a_dst(k, j) * z(msg.sources[e], k * d + j);
      }
      out(e, k) = left + right;
    }
  return out;
}

std::vector<NodeCoefficients> expc_coefficients(const Layer& layer, const Graph& g, const Matrix& h,
                                                const ForwardOptions& options) {
  const LayerKind k = layer.spec().kind;
  if (!is_expc_family(k) && k != LayerKind::CombC) {
    throw ContractError("expc_coefficients: " + to_string(k) + " has no learned coefficient generator");
  }
  Tape tape;
  Layer& mutable_layer = const_cast<Layer&>(layer);
  const Matrix m = coefficient_matrix(tape, mutable_layer, g, tape.constant(h), options).value();
  const MessageIndex& msg = g.messages();
  std::vector<NodeCoefficients> out(g.num_nodes());
  std::size_t e = 0;
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const std::size_t deg = static_cast<std::size_t>(msg.neighborhood_size[v]);
    NodeCoefficients& nc = out[v];
    nc.coefficients = Matrix(m.cols, deg);
    nc.features = Matrix(deg, h.cols);
    for (std::size_t c = 0; c < deg; ++c, ++e) {
      nc.neighbors.push_back(msg.sources[e]);
      for (std::size_t r = 0; r < m.cols; ++r) nc.coefficients(r, c) = m(e, r);
      std::copy(h.row(msg.sources[e]).begin(), h.row(msg.sources[e]).end(), nc.features.row(c).begin());
    }
  }
  return out;
}

std::vector<NodeCoefficients> scalar_coefficients(LayerKind kind, const Graph& g, const Matrix& h) {
  if (kind != LayerKind::Gcn && kind != LayerKind::Gin0) {
    throw ContractError("scalar_coefficients: only GCN and GIN-0 have fixed scalar coefficients");
  }
  std::vector<NodeCoefficients> out(g.num_nodes());
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    NodeCoefficients& nc = out[v];
    nc.neighbors = neighborhood(g, v);
    const std::size_t deg = nc.neighbors.size();
    nc.coefficients = Matrix(1, deg);
    nc.features = Matrix(deg, h.cols);
    for (std::size_t c = 0; c < deg; ++c) {
      const std::size_t u = nc.neighbors[c];
      nc.coefficients(0, c) = kind == LayerKind::Gin0
                                  ? 1.0
                                  : 1.0 / std::sqrt(static_cast<double>(deg) * static_cast<double>(g.degree(u) + 1));
      std::copy(h.row(u).begin(), h.row(u).end(), nc.features.row(c).begin());
    }
  }
  return out;
}

ThreeStageResult expc_three_stage_forward(const Layer& layer, const Graph& g, const Matrix& h) {
  const LayerSpec& spec = layer.spec();
  if (!is_expc_family(spec.kind) || spec.mlp_depth != 1) {
    throw ContractError("expc_three_stage_forward: needs an ExpC layer with a 1-layer MLP");
  }
  if (h.rows != g.num_nodes() || h.cols != spec.d_in) {
    throw DimensionError("expc_three_stage_forward: input " + h.shape_string() + " does not match layer");
  }
  const auto coeffs = expc_coefficients(layer, g, h);
  const Matrix& w = layer.parameter("mlp.0.W").value;
  const Matrix& b = layer.parameter("mlp.0.b").value;
  const std::size_t rows = spec.coefficient_rows(), d = spec.d_in, dout = spec.d_out;

  ThreeStageResult res;
  res.output = Matrix(g.num_nodes(), dout);
  res.preactivations = Matrix(g.messages().centers.size(), dout);
  std::size_t e0 = 0;
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const NodeCoefficients& nc = coeffs[v];
    const std::size_t deg = nc.neighbors.size();
    // Per-neighbor pre-activation W'_[i,:] vec(m_uv h_u^T) + b'_[i].
    Matrix pre(deg, dout);
    for (std::size_t c = 0; c < deg; ++c)
      for (std::size_t i = 0; i < dout; ++i) {
        double z = b(i, 0);
        for (std::size_t j = 0; j < d; ++j)
          for (std::size_t q = 0; q < rows; ++q) z += w(i, j * rows + q) * nc.coefficients(q, c) * nc.features(c, j);
        pre(c, i) = z;
        res.preactivations(e0 + c, i) = z;
      }
    ThreeStageNode node;
    for (std::size_t i = 0; i < dout; ++i) {
      std::vector<std::size_t> cols;
      for (std::size_t c = 0; c < deg; ++c)
        if (pre(c, i) > 0.0) cols.push_back(c);
      Matrix block(rows, cols.size());
      Matrix feats(cols.size(), d);
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < cols.size(); ++k) {
        for (std::size_t q = 0; q < rows; ++q) block(q, k) = nc.coefficients(q, cols[k]);
        std::copy(nc.features.row(cols[k]).begin(), nc.features.row(cols[k]).end(), feats.row(k).begin());
        members.push_back(nc.neighbors[cols[k]]);
      }
      Matrix r = cols.empty() ? Matrix(rows, d) : matmul(block, feats);
      double y = static_cast<double>(cols.size()) * b(i, 0);
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t q = 0; q < rows; ++q) y += w(i, j * rows + q) * r(q, j);
      res.output(v, i) = y;
      node.active.push_back(std::move(members));
      node.coefficient_blocks.push_back(std::move(block));
      node.aggregates.push_back(std::move(r));
    }
    res.nodes.push_back(std::move(node));
    e0 += deg;
  }
  return res;
}

Var readout(std::span<const Var> layer_outputs, ReadoutMode mode) {
  if (layer_outputs.empty()) throw ContractError("readout: no layer outputs");
  Var cat = layer_outputs.size() == 1 ? layer_outputs.front() : concat_cols(layer_outputs);
  return mode == ReadoutMode::Sum ? sum_rows(cat) : mean_rows(cat);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  if (spec_.layers.empty()) throw ContractError("Model: no layers");
  Rng rng(spec_.seed);
  std::size_t width = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (i > 0 && spec_.layers[i].d_in != spec_.layers[i - 1].d_out) {
      throw DimensionError("Model: layer " + std::to_string(i) + " input width does not match previous output");
    }
    layers_.emplace_back(spec_.layers[i], rng);
    width += spec_.layers[i].d_out;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  head_w_ = Parameter("head.W", random_uniform(spec_.out_dim, width, rng, -bound, bound));
  head_b_ = Parameter("head.b", random_uniform(spec_.out_dim, 1, rng, -bound, bound));
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (Layer& l : layers_)
    for (Parameter& p : l.parameters()) out.push_back(&p);
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

Var Model::forward(Tape& tape, const Graph& g, const ForwardOptions& options) {
  Var h = tape.constant(g.node_features());
  std::vector<Var> outputs;
  for (Layer& l : layers_) {
    h = l.forward(tape, g, h, options);
    outputs.push_back(h);
  }
  Var pooled = readout(outputs, spec_.readout);
  return add(matmul(pooled, transpose(tape.param(head_w_))), transpose(tape.param(head_b_)));
}

std::vector<Matrix> Model::hidden_states(const Graph& g) {
  Tape tape;
  Var h = tape.constant(g.node_features());
  std::vector<Matrix> out;
  for (Layer& l : layers_) {
    h = l.forward(tape, g, h);
    out.push_back(h.value());
  }
  return out;
}

Matrix Model::embed(const Graph& g) {
  Tape tape;
  Var h = tape.constant(g.node_features());
  std::vector<Var> outputs;
  for (Layer& l : layers_) {
    h = l.forward(tape, g, h);
    outputs.push_back(h);
  }
  return readout(outputs, spec_.readout).value();
}

double Model::predict(const Graph& g) {
  Tape tape;
  return forward(tape, g).value().data[0];
}

bool Model::same_parameters(const Model& other) const {
  const auto a = parameters();
  const auto b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i]->name != b[i]->name || a[i]->value.rows != b[i]->value.rows || a[i]->value.cols != b[i]->value.cols ||
        std::memcmp(a[i]->value.data.data(), b[i]->value.data.data(), a[i]->value.size() * sizeof(double)) != 0)
      return false;
  return true;
}

namespace {

std::string append_to_string(AppendRows a) {
  switch (a) {
    case AppendRows::None: return "none";
    case AppendRows::One: return "one";
    case AppendRows::OneAndInvDegree: return "one_and_invdeg";
  }
  return "none";
}

AppendRows append_from_string(const std::string& s) {
  if (s == "none") return AppendRows::None;
  if (s == "one") return AppendRows::One;
  if (s == "one_and_invdeg") return AppendRows::OneAndInvDegree;
  throw std::invalid_argument("unknown append mode '" + s + "'");
}

}  // namespace

void Model::save(const std::filesystem::path& manifest_path) const {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  json layers = json::array();
  for (const LayerSpec& s : spec_.layers) {
    layers.push_back({{"kind", to_string(s.kind)},
                      {"d_in", s.d_in},
                      {"d_out", s.d_out},
                      {"s", s.s},
                      {"heads", s.heads},
                      {"re_sum", s.re_sum},
                      {"mlp_depth", s.mlp_depth},
                      {"append", append_to_string(s.append)}});
  }
  json params = json::array();
  std::size_t offset = 0;
  for (const Parameter* p : parameters()) {
    params.push_back({{"name", p->name}, {"rows", p->value.rows}, {"cols", p->value.cols}, {"offset", offset}});
    offset += p->value.size();
  }
  const json manifest = {{"format", "agglab-model"},
                         {"version", 1},
                         {"seed", spec_.seed},
                         {"readout", to_string(spec_.readout)},
                         {"out_dim", spec_.out_dim},
                         {"layers", std::move(layers)},
                         {"parameters", std::move(params)},
                         {"parameter_count", offset},
                         {"blob", blob_path.filename().string()},
                         {"byte_order", "little"}};
  std::ofstream m(manifest_path, std::ios::binary);
  if (!m) throw std::runtime_error("Model::save: cannot open " + manifest_path.string());
  m << manifest.dump(2) << '\n';
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("Model::save: cannot open " + blob_path.string());
  for (const Parameter* p : parameters())
    blob.write(reinterpret_cast<const char*>(p->value.data.data()),
               static_cast<std::streamsize>(p->value.size() * sizeof(double)));
}

Model Model::load(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("Model::load: cannot open " + manifest_path.string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "agglab-model") throw std::runtime_error("Model::load: not an agglab checkpoint");
  ModelSpec spec;
  spec.seed = manifest.at("seed").get<std::uint64_t>();
  spec.readout = readout_mode_from_string(manifest.at("readout").get<std::string>());
  spec.out_dim = manifest.at("out_dim").get<std::size_t>();
  for (const auto& l : manifest.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    s.d_in = l.at("d_in").get<std::size_t>();
    s.d_out = l.at("d_out").get<std::size_t>();
    s.s = l.at("s").get<std::size_t>();
    s.heads = l.at("heads").get<std::size_t>();
    s.re_sum = l.at("re_sum").get<bool>();
    s.mlp_depth = l.at("mlp_depth").get<std::size_t>();
    s.append = append_from_string(l.at("append").get<std::string>());
    spec.layers.push_back(s);
  }
  Model model(spec);
  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("Model::load: cannot open " + blob_path.string());
  const auto& entries = manifest.at("parameters");
  auto params = model.parameters();
  if (entries.size() != params.size()) throw std::runtime_error("Model::load: parameter list does not match layers");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (entries[i].at("name").get<std::string>() != p.name || entries[i].at("rows").get<std::size_t>() != p.value.rows ||
        entries[i].at("cols").get<std::size_t>() != p.value.cols) {
      throw std::runtime_error("Model::load: parameter " + std::to_string(i) + " does not match its declaration");
    }
    blob.read(reinterpret_cast<char*>(p.value.data.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!blob) throw std::runtime_error("Model::load: parameter blob is truncated");
  }
  return model;
}

ModelSpec make_model_spec(LayerKind kind, std::size_t d_in, std::size_t hidden, std::size_t num_layers, std::size_t s,
                          bool re_sum, std::size_t heads, std::uint64_t seed, ReadoutMode readout) {
  ModelSpec spec;
  spec.seed = seed;
  spec.readout = readout;
  for (std::size_t i = 0; i < num_layers; ++i) {
    LayerSpec l;
    l.kind = kind;
    l.d_in = i == 0 ? d_in : hidden;
    l.d_out = hidden;
    l.s = s;
    l.re_sum = re_sum;
    l.heads = heads;
    l.mlp_depth = kind == LayerKind::ExpCThreeStage ? 1 : 2;
    spec.layers.push_back(l);
  }
  return spec;
}

}  // namespace agglab
