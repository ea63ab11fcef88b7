#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace agglab {

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition other than a shape rule is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Dense row-major f64 matrix. Column vectors are n x 1, scalars 1 x 1.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);
  static Matrix column(std::vector<double> values);
  static Matrix identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// A persistent trainable tensor. Its grad accumulates across backward passes
/// until zero_grad() is called.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols) {}
  void zero_grad() { grad = Matrix(value.rows, value.cols); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode autodiff recorder. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a reverse sweep is a topological order.
/// A Tape is single-owner; do not share one across threads.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a value that carries no gradient.
  Var constant(Matrix value);
  /// Records a leaf whose gradient is kept on the tape (see Var::grad()).
  Var leaf(Matrix value);
  /// Records a leaf bound to `param`; backward() adds into param.grad.
  Var param(Parameter& param);

  /// Records an operation. `backward` reads the output gradient of `self`
  /// and accumulates into inputs through accumulate().
  Var record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Populates gradients of every node reachable from `loss` (which must be 1x1).
  /// Tape-local gradients are reset first, so repeated calls are idempotent;
  /// Parameter gradients accumulate.
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Adds `g` (same shape as node `id`) into that node's gradient buffer.
  void accumulate(std::size_t id, const Matrix& g);
  /// Mutable gradient buffer of node `id`, allocated on first use.
  Matrix& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

enum class ActivationKind { Tanh, Relu, LeakyRelu, Sigmoid };

struct Activation {
  ActivationKind kind = ActivationKind::Relu;
  double alpha = 0.2;  // LeakyRelu negative slope
};

// Differentiable operations. All operands must live on the same tape.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var elementwise_mul(Var a, Var b);
/// Adds column vector b (n x 1) to every row of x (m x n).
Var add_bias(Var x, Var b);
Var activation(Var x, Activation act);
Var tanh(Var x);
Var relu(Var x);
Var leaky_relu(Var x, double alpha = 0.2);
Var sigmoid(Var x);
Var abs(Var x);
Var square(Var x);
Var softmax_rows(Var x);
/// Softmax over the rows that share a segment id, independently for each column.
Var segment_softmax(Var x, std::span<const std::size_t> segment, std::size_t num_segments);
/// Column-stacking vec(): s x d -> sd x 1.
Var vec_stack(Var x);
/// Inverse of vec_stack: sd x 1 -> s x d.
Var unvec(Var v, std::size_t rows, std::size_t cols);
/// m h^T for column vectors m (s x 1) and h (d x 1).
Var outer(Var m, Var h);
/// Row e of the result is vec(m_e h_e^T) for rows m_e of `m` (E x s) and h_e of `h` (E x d).
Var rowwise_outer_vec(Var m, Var h);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
/// Sums over rows: m x n -> 1 x n.
Var sum_rows(Var x);
Var mean_rows(Var x);
Var sum_all(Var x);
Var mean_all(Var x);
/// out.row(e) = x.row(index[e]).
Var gather_rows(Var x, std::span<const std::size_t> index);
/// out.row(index[e]) += x.row(e), out has `num_rows` rows.
Var scatter_add_rows(Var x, std::span<const std::size_t> index, std::size_t num_rows);
/// Multiplies row e by the constant factor[e].
Var scale_rows(Var x, std::span<const double> factor);
/// out.data[p] = x.data[source[p]], or 0 when source[p] < 0. Covers reshapes,
/// column permutations and block-diagonal embeddings.
Var gather_elements(Var x, std::span<const long> source, std::size_t rows, std::size_t cols);

/// Central-difference gradient check of a scalar function of one tensor.
/// Returns max_i |numeric_i - analytic_i| / max(1, |analytic_i|).
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& theta, double eps = 1e-6);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Gradient check over persistent parameters. `loss` builds a fresh graph on
/// the given tape using tape.param(...). Parameter values are perturbed in
/// place and restored.
GradCheckReport check_parameter_gradients(const std::function<Var(Tape&)>& loss,
                                          std::span<Parameter* const> params, double eps = 1e-6);

}  // namespace agglab
