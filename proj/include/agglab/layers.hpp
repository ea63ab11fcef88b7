#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "agglab/aggregation.hpp"
#include "agglab/graph.hpp"
#include "agglab/random.hpp"
#include "agglab/tensor.hpp"

namespace agglab {

enum class LayerKind { Gcn, Gin0, GatDefault, GatExpanding, ExpC, CombC, ExpCThreeStage, ExpCMultiAgg };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);
const std::vector<LayerKind>& all_layer_kinds();

/// Test-only substitute for the Tanh coefficient generator.
enum class CoefficientBypass { None, Ones, Zeros, InvDegree };

struct LayerSpec {
  LayerKind kind = LayerKind::ExpC;
  std::size_t d_in = 1;
  std::size_t d_out = 1;
  /// Expansion factor of the ExpC family (learned coefficient rows).
  std::size_t s = 1;
  /// Attention heads of the GAT family.
  std::size_t heads = 1;
  /// Per-neighbor MLP before the sum (ExpC, CombC, multi-aggregator).
  bool re_sum = true;
  std::size_t mlp_depth = 2;
  /// Constant rows appended by ExpCMultiAgg.
  AppendRows append = AppendRows::One;

  /// Throws ContractError on inconsistent settings.
  void validate() const;
  /// Coefficient rows actually multiplied into h_u (s plus appended rows).
  std::size_t coefficient_rows() const;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ForwardOptions {
  CoefficientBypass bypass = CoefficientBypass::None;
};

/// One message-passing layer and its trainable tensors. Parameter order is
/// fixed per kind and is the checkpoint order.
///
/// Tensor names by kind:
///   Gcn            W [d_out x d_in], b [d_out x 1]
///   Gin0           mlp.{k}.W, mlp.{k}.b
///   Gat*           W [heads*d_out x d_in] (rows k*d_out.. are head k),
///                  a_src [heads x d_out], a_dst [heads x d_out]
///   ExpC*, CombC   coef.W [rows x 2 d_in], coef.b [rows x 1], mlp.{k}.W, mlp.{k}.b
class Layer {
 public:
  Layer(LayerSpec spec, Rng& rng);

  const LayerSpec& spec() const { return spec_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  /// h: num_nodes x d_in on `tape`. Returns num_nodes x d_out.
  Var forward(Tape& tape, const Graph& g, Var h, const ForwardOptions& options = {});

 private:
  LayerSpec spec_;
  std::vector<Parameter> params_;
};

Var gcn_forward(Tape& tape, Layer& layer, const Graph& g, Var h);
Var gin0_forward(Tape& tape, Layer& layer, const Graph& g, Var h);
/// Per-head attention, outputs averaged over heads, then ReLU.
Var gat_default_forward(Tape& tape, Layer& layer, const Graph& g, Var h);
/// The same layer written as an expanding aggregation: coefficient vectors
/// alpha_vu in R^K from block-diagonal attention, vec(alpha_vu h_u^T) summed,
/// then one shared matrix.
Var gat_expanding_forward(Tape& tape, Layer& layer, const Graph& g, Var h);
Var expc_forward(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options = {});
Var combc_forward(Tape& tape, Layer& layer, const Graph& g, Var h, const ForwardOptions& options = {});
/// Differentiable block-diagonal extraction over per-dimension active
/// neighbor sets. Requires mlp_depth == 1.
Var expc_three_stage_tape_forward(Tape& tape, Layer& layer, const Graph& g, Var h);

/// Per-head attention logits a^T [W h_v || W h_u] for every message, E x K.
Matrix gat_concat_logits(const Layer& layer, const Graph& g, const Matrix& h);
/// Same logits via the split a = [a_src || a_dst]: a_src^T W h_v + a_dst^T W h_u.
Matrix gat_split_logits(const Layer& layer, const Graph& g, const Matrix& h);

/// Coefficient matrices of one node: column u of `coefficients` is m_uv for
/// the u-th member of N(v).
struct NodeCoefficients {
  std::vector<std::size_t> neighbors;
  Matrix coefficients;  // rows x |N(v)|
  Matrix features;      // |N(v)| x d_in
};
/// Post-activation coefficient matrix of every node for ExpC-family layers.
std::vector<NodeCoefficients> expc_coefficients(const Layer& layer, const Graph& g, const Matrix& h,
                                                const ForwardOptions& options = {});
/// GCN / GIN-0 coefficient vectors (1 x |N(v)|) per node.
std::vector<NodeCoefficients> scalar_coefficients(LayerKind kind, const Graph& g, const Matrix& h);

struct ThreeStageNode {
  /// active[i] lists u in N(v) whose pre-activation in output dim i is > 0.
  std::vector<std::vector<std::size_t>> active;
  /// Coefficient block M_vi (s x |N_i(v)|) and aggregate r_vi = M_vi H_vi (s x d).
  std::vector<Matrix> coefficient_blocks;
  std::vector<Matrix> aggregates;
};

struct ThreeStageResult {
  Matrix output;  // num_nodes x d_out
  std::vector<ThreeStageNode> nodes;
  /// Per-message pre-activations W' vec(m_uv h_u^T) + b', E x d_out, message order.
  Matrix preactivations;
};

/// Coefficient generation, per-dimension aggregation over active neighbor
/// subsets, then block-diagonal extraction plus |N_i(v)| b'. Value-level.
ThreeStageResult expc_three_stage_forward(const Layer& layer, const Graph& g, const Matrix& h);

enum class ReadoutMode { Sum, Mean };
std::string to_string(ReadoutMode mode);
ReadoutMode readout_mode_from_string(const std::string& name);

/// Concatenates per-layer node features and pools over nodes: 1 x sum(widths).
Var readout(std::span<const Var> layer_outputs, ReadoutMode mode);

struct ModelSpec {
  std::vector<LayerSpec> layers;
  ReadoutMode readout = ReadoutMode::Sum;
  std::size_t out_dim = 1;
  std::uint64_t seed = 0;
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Stacked layers, concatenated-layer readout and a linear prediction head.
class Model {
 public:
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Parameter& head_weight() { return head_w_; }
  Parameter& head_bias() { return head_b_; }

  /// All trainable tensors in checkpoint order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  /// 1 x out_dim prediction for one graph.
  Var forward(Tape& tape, const Graph& g, const ForwardOptions& options = {});
  /// Per-layer node features (value-level).
  std::vector<Matrix> hidden_states(const Graph& g);
  /// Graph-level readout vector (value-level).
  Matrix embed(const Graph& g);
  double predict(const Graph& g);

  void save(const std::filesystem::path& manifest_path) const;
  static Model load(const std::filesystem::path& manifest_path);

  bool same_parameters(const Model& other) const;

 private:
  ModelSpec spec_;
  std::vector<Layer> layers_;
  Parameter head_w_;
  Parameter head_b_;
};

/// Convenience: `num_layers` layers of one kind at width `hidden` over input
/// width `d_in`.
ModelSpec make_model_spec(LayerKind kind, std::size_t d_in, std::size_t hidden, std::size_t num_layers,
                          std::size_t s = 1, bool re_sum = true, std::size_t heads = 1, std::uint64_t seed = 0,
                          ReadoutMode readout = ReadoutMode::Sum);

}  // namespace agglab
