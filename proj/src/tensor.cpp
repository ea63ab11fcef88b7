#include "agglab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace agglab {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
  return tape_of(a);
}

}  // namespace

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw DimensionError("Matrix: " + std::to_string(data.size()) + " values for shape [" + std::to_string(r) + "x" +
                         std::to_string(c) + "]");
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<std::vector<double>> copy;
  for (const auto& r : rows) copy.emplace_back(r);
  return from_rows(copy);
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols) throw DimensionError("Matrix::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

Matrix Matrix::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Matrix(n, 1, std::move(values));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape_string() + " vs " + b.shape_string());
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* orow = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar(): tensor has shape " + v.shape_string());
  return v.data[0];
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, {}, {}, &p});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, std::move(inputs), needs ? std::move(backward) : BackwardFn{},
                        nullptr});
  return {this, nodes_.size() - 1};
}

const Matrix& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) {
    static thread_local Matrix empty;
    empty = Matrix(n.value.rows, n.value.cols);
    return empty;
  }
  return n.grad;
}

Matrix& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.rows != n.value.rows) n.grad = Matrix(n.value.rows, n.value.cols);
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  Matrix& buf = grad_buffer(id);
  require_same_shape(buf, g, "accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i];
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ContractError("backward: loss must be scalar, got " + lv.shape_string());
  for (Node& n : nodes_) n.grad = Matrix();
  if (!nodes_[loss.id()].needs_grad) return;
  grad_buffer(loss.id()).data[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      Matrix& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg = Matrix(n.grad.rows, n.grad.cols);
      for (std::size_t i = 0; i < pg.size(); ++i) pg.data[i] += n.grad.data[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Matrix out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, matmul(g, transpose(tp.value(ib))));
    if (tp.needs_grad(ib)) tp.accumulate(ib, matmul(transpose(tp.value(ia)), g));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(transpose(a.value()), {ia},
                  [ia](Tape& tp, std::size_t self) { tp.accumulate(ia, transpose(tp.grad(self))); });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    if (tp.needs_grad(ib)) {
      Matrix g = tp.grad(self);
      for (double& x : g.data) x = -x;
      tp.accumulate(ib, g);
    }
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  Matrix out = a.value();
  for (double& x : out.data) x *= factor;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, factor](Tape& tp, std::size_t self) {
    Matrix g = tp.grad(self);
    for (double& x : g.data) x *= factor;
    tp.accumulate(ia, g);
  });
}

Var elementwise_mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "elementwise_mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      Matrix& buf = tp.grad_buffer(ia);
      const Matrix& bv = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * bv.data[i];
    }
    if (tp.needs_grad(ib)) {
      Matrix& buf = tp.grad_buffer(ib);
      const Matrix& av = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * av.data[i];
    }
  });
}

Var add_bias(Var x, Var b) {
  Tape& t = tape_of(x, b);
  const Matrix& xv = x.value();
  const Matrix& bv = b.value();
  if (bv.cols != 1 || bv.rows != xv.cols) {
    throw DimensionError("add_bias: bias " + bv.shape_string() + " does not match input " + xv.shape_string());
  }
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv.data[c];
  const std::size_t ix = x.id(), ib = b.id();
  return t.record(std::move(out), {ix, ib}, [ix, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.accumulate(ix, g);
    if (tp.needs_grad(ib)) {
      Matrix& buf = tp.grad_buffer(ib);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) buf.data[c] += g(r, c);
    }
  });
}

Var activation(Var x, Activation act) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (double& v : out.data) {
    switch (act.kind) {
      case ActivationKind::Tanh: v = std::tanh(v); break;
      case ActivationKind::Relu: v = v > 0.0 ? v : 0.0; break;
      case ActivationKind::LeakyRelu: v = v > 0.0 ? v : act.alpha * v; break;
      case ActivationKind::Sigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
    }
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix, act](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& in = tp.value(ix);
    const Matrix& y = tp.value(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (act.kind) {
        case ActivationKind::Tanh: d = 1.0 - y.data[i] * y.data[i]; break;
        case ActivationKind::Relu: d = in.data[i] > 0.0 ? 1.0 : 0.0; break;
        case ActivationKind::LeakyRelu: d = in.data[i] > 0.0 ? 1.0 : act.alpha; break;
        case ActivationKind::Sigmoid: d = y.data[i] * (1.0 - y.data[i]); break;
      }
      buf.data[i] += g.data[i] * d;
    }
  });
}

Var tanh(Var x) { return activation(x, {ActivationKind::Tanh}); }
Var relu(Var x) { return activation(x, {ActivationKind::Relu}); }
Var leaky_relu(Var x, double alpha) { return activation(x, {ActivationKind::LeakyRelu, alpha}); }
Var sigmoid(Var x) { return activation(x, {ActivationKind::Sigmoid}); }

Var abs(Var x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (double& v : out.data) v = std::abs(v);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& in = tp.value(ix);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = in.data[i] > 0.0 ? 1.0 : (in.data[i] < 0.0 ? -1.0 : 0.0);
      buf.data[i] += g.data[i] * s;
    }
  });
}

Var square(Var x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (double& v : out.data) v = v * v;
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& in = tp.value(ix);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += 2.0 * in.data[i] * g.data[i];
  });
}

namespace {

// Backward of a softmax over groups of entries: dx = y * (g - sum(g * y)).
void softmax_group_backward(const Matrix& y, const Matrix& g, Matrix& buf, const std::vector<std::size_t>& members,
                            std::size_t col) {
  double dot = 0.0;
  for (std::size_t r : members) dot += g(r, col) * y(r, col);
  for (std::size_t r : members) buf(r, col) += y(r, col) * (g(r, col) - dot);
}

}  // namespace

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < y.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols; ++c) buf(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var segment_softmax(Var x, std::span<const std::size_t> segment, std::size_t num_segments) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (segment.size() != xv.rows) {
    throw DimensionError("segment_softmax: " + std::to_string(segment.size()) + " segment ids for input " +
                         xv.shape_string());
  }
  std::vector<std::vector<std::size_t>> members(num_segments);
  for (std::size_t r = 0; r < segment.size(); ++r) {
    if (segment[r] >= num_segments) throw DimensionError("segment_softmax: segment id out of range");
    members[segment[r]].push_back(r);
  }
  Matrix out = xv;
  for (const auto& rows : members) {
    if (rows.empty()) continue;
    for (std::size_t c = 0; c < xv.cols; ++c) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t r : rows) mx = std::max(mx, xv(r, c));
      double total = 0.0;
      for (std::size_t r : rows) {
        out(r, c) = std::exp(xv(r, c) - mx);
        total += out(r, c);
      }
      for (std::size_t r : rows) out(r, c) /= total;
    }
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix, members = std::move(members)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (const auto& rows : members)
      for (std::size_t c = 0; c < y.cols; ++c) softmax_group_backward(y, g, buf, rows, c);
  });
}

Var gather_elements(Var x, std::span<const long> source, std::size_t rows, std::size_t cols) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (source.size() != rows * cols) throw DimensionError("gather_elements: index map size does not match output shape");
  Matrix out(rows, cols);
  for (std::size_t p = 0; p < source.size(); ++p) {
    if (source[p] < 0) continue;
    if (static_cast<std::size_t>(source[p]) >= xv.size()) throw DimensionError("gather_elements: index out of range");
    out.data[p] = xv.data[static_cast<std::size_t>(source[p])];
  }
  const std::size_t ix = x.id();
  std::vector<long> map(source.begin(), source.end());
  return t.record(std::move(out), {ix}, [ix, map = std::move(map)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t p = 0; p < map.size(); ++p)
      if (map[p] >= 0) buf.data[static_cast<std::size_t>(map[p])] += g.data[p];
  });
}

Var vec_stack(Var x) {
  const Matrix& xv = x.value();
  std::vector<long> map(xv.size());
  // vec() stacks columns: entry (i, j) lands at j * rows + i.
  for (std::size_t j = 0; j < xv.cols; ++j)
    for (std::size_t i = 0; i < xv.rows; ++i) map[j * xv.rows + i] = static_cast<long>(i * xv.cols + j);
  return gather_elements(x, map, xv.size(), 1);
}

Var unvec(Var v, std::size_t rows, std::size_t cols) {
  const Matrix& vv = v.value();
  if (vv.size() != rows * cols) {
    throw DimensionError("unvec: " + vv.shape_string() + " cannot be reshaped to [" + std::to_string(rows) + "x" +
                         std::to_string(cols) + "]");
  }
  std::vector<long> map(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) map[i * cols + j] = static_cast<long>(j * rows + i);
  return gather_elements(v, map, rows, cols);
}

Var outer(Var m, Var h) {
  if (m.cols() != 1 || h.cols() != 1) {
    throw DimensionError("outer: expected column vectors, got " + m.value().shape_string() + " and " +
                         h.value().shape_string());
  }
  return matmul(m, transpose(h));
}

Var rowwise_outer_vec(Var m, Var h) {
  Tape& t = tape_of(m, h);
  const Matrix& mv = m.value();
  const Matrix& hv = h.value();
  if (mv.rows != hv.rows) {
    throw DimensionError("rowwise_outer_vec: row counts differ " + mv.shape_string() + " vs " + hv.shape_string());
  }
  const std::size_t s = mv.cols, d = hv.cols;
  Matrix out(mv.rows, s * d);
  for (std::size_t e = 0; e < mv.rows; ++e) {
    double* o = out.data.data() + e * s * d;
    const double* me = mv.data.data() + e * s;
    const double* he = hv.data.data() + e * d;
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < s; ++i) o[j * s + i] = me[i] * he[j];
  }
  const std::size_t im = m.id(), ih = h.id();
  return t.record(std::move(out), {im, ih}, [im, ih, s, d](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& mval = tp.value(im);
    const Matrix& hval = tp.value(ih);
    const bool gm = tp.needs_grad(im), gh = tp.needs_grad(ih);
    Matrix* bm = gm ? &tp.grad_buffer(im) : nullptr;
    Matrix* bh = gh ? &tp.grad_buffer(ih) : nullptr;
    for (std::size_t e = 0; e < g.rows; ++e) {
      const double* ge = g.data.data() + e * s * d;
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < s; ++i) {
          const double gv = ge[j * s + i];
          if (gm) bm->data[e * s + i] += gv * hval.data[e * d + j];
          if (gh) bh->data[e * d + j] += gv * mval.data[e * s + i];
        }
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (p.tape() != &t) throw ContractError("concat_rows: operands recorded on different tapes");
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<long>(offset));
    offset += p.value().size();
  }
  auto inputs = ids;
  return t.record(std::move(out), std::move(inputs), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const Matrix& v = tp.value(id);
      if (tp.needs_grad(id)) {
        Matrix& buf = tp.grad_buffer(id);
        for (std::size_t i = 0; i < v.size(); ++i) buf.data[i] += g.data[off + i];
      }
      off += v.size();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (p.tape() != &t) throw ContractError("concat_cols: operands recorded on different tapes");
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols; ++c) out(r, offset + c) = v(r, c);
    offset += v.cols;
  }
  auto inputs = ids;
  return t.record(std::move(out), std::move(inputs), [ids](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const Matrix& v = tp.value(id);
      if (tp.needs_grad(id)) {
        Matrix& buf = tp.grad_buffer(id);
        for (std::size_t r = 0; r < v.rows; ++r)
          for (std::size_t c = 0; c < v.cols; ++c) buf(r, c) += g(r, off + c);
      }
      off += v.cols;
    }
  });
}

Var concat_rows(std::initializer_list<Var> parts) { return concat_rows(std::span<const Var>(parts.begin(), parts.size())); }
Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.rows) throw DimensionError("slice_rows: range exceeds " + xv.shape_string());
  std::vector<long> map(count * xv.cols);
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = static_cast<long>(begin * xv.cols + i);
  return gather_elements(x, map, count, xv.cols);
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.cols) throw DimensionError("slice_cols: range exceeds " + xv.shape_string());
  std::vector<long> map(xv.rows * count);
  for (std::size_t r = 0; r < xv.rows; ++r)
    for (std::size_t c = 0; c < count; ++c) map[r * count + c] = static_cast<long>(r * xv.cols + begin + c);
  return gather_elements(x, map, xv.rows, count);
}

Var sum_rows(Var x) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  Matrix out(1, xv.cols);
  for (std::size_t r = 0; r < xv.rows; ++r)
    for (std::size_t c = 0; c < xv.cols; ++c) out.data[c] += xv(r, c);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < buf.rows; ++r)
      for (std::size_t c = 0; c < buf.cols; ++c) buf(r, c) += g.data[c];
  });
}

Var mean_rows(Var x) {
  const std::size_t n = x.rows();
  if (n == 0) throw ContractError("mean_rows: empty input");
  return scale(sum_rows(x), 1.0 / static_cast<double>(n));
}

Var sum_all(Var x) {
  Tape& t = tape_of(x);
  double total = 0.0;
  for (double v : x.value().data) total += v;
  const std::size_t ix = x.id();
  return t.record(Matrix(1, 1, total), {ix}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self).data[0];
    Matrix& buf = tp.grad_buffer(ix);
    for (double& b : buf.data) b += g;
  });
}

Var mean_all(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractError("mean_all: empty input");
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  Matrix out(index.size(), xv.cols);
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= xv.rows) throw DimensionError("gather_rows: row index out of range for " + xv.shape_string());
    std::copy_n(xv.data.data() + index[e] * xv.cols, xv.cols, out.data.data() + e * xv.cols);
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(out), {ix}, [ix, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& buf = tp.grad_buffer(ix);
    const std::size_t c = g.cols;
    for (std::size_t e = 0; e < idx.size(); ++e) {
      double* b = buf.data.data() + idx[e] * c;
      const double* ge = g.data.data() + e * c;
      for (std::size_t j = 0; j < c; ++j) b[j] += ge[j];
    }
  });
}

Var scatter_add_rows(Var x, std::span<const std::size_t> index, std::size_t num_rows) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (index.size() != xv.rows) throw DimensionError("scatter_add_rows: index length does not match " + xv.shape_string());
  Matrix out(num_rows, xv.cols);
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= num_rows) throw DimensionError("scatter_add_rows: target row out of range");
    double* o = out.data.data() + index[e] * xv.cols;
    const double* xe = xv.data.data() + e * xv.cols;
    for (std::size_t j = 0; j < xv.cols; ++j) o[j] += xe[j];
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(out), {ix}, [ix, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& buf = tp.grad_buffer(ix);
    const std::size_t c = g.cols;
    for (std::size_t e = 0; e < idx.size(); ++e) {
      double* b = buf.data.data() + e * c;
      const double* ge = g.data.data() + idx[e] * c;
      for (std::size_t j = 0; j < c; ++j) b[j] += ge[j];
    }
  });
}

Var scale_rows(Var x, std::span<const double> factor) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (factor.size() != xv.rows) throw DimensionError("scale_rows: factor length does not match " + xv.shape_string());
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (double& v : out.row(r)) v *= factor[r];
  const std::size_t ix = x.id();
  std::vector<double> f(factor.begin(), factor.end());
  return t.record(std::move(out), {ix}, [ix, f = std::move(f)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& buf = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) buf(r, c) += g(r, c) * f[r];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& theta, double eps) {
  if (!(eps >= 1e-8 && eps <= 1e-4)) throw ContractError("finite_diff_check: eps must lie in [1e-8, 1e-4]");
  Matrix analytic;
  {
    Tape tape;
    Var x = tape.leaf(theta);
    Var loss = f(tape, x);
    tape.backward(loss);
    analytic = x.grad();
  }
  auto eval = [&](const Matrix& point) {
    Tape tape;
    return f(tape, tape.constant(point)).scalar();
  };
  double worst = 0.0;
  Matrix probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double up = eval(probe);
    probe.data[i] = orig - eps;
    const double down = eval(probe);
    probe.data[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.data[i];
    worst = std::max(worst, std::abs(numeric - a) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

GradCheckReport check_parameter_gradients(const std::function<Var(Tape&)>& loss, std::span<Parameter* const> params,
                                          double eps) {
  if (!(eps >= 1e-8 && eps <= 1e-4)) throw ContractError("check_parameter_gradients: eps must lie in [1e-8, 1e-4]");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  std::vector<Matrix> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data[i];
      p.value.data[i] = orig + eps;
      double up, down;
      {
        Tape tape;
        up = loss(tape).scalar();
      }
      p.value.data[i] = orig - eps;
      {
        Tape tape;
        down = loss(tape).scalar();
      }
      p.value.data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k].data[i];
      const double rel = std::abs(numeric - a) / std::max(1.0, std::abs(a));
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p.name;
        report.worst_index = i;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace agglab
