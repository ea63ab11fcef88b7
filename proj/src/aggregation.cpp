#include "agglab/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

namespace agglab {

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) e(static_cast<long>(r), static_cast<long>(c)) = m(r, c);
  return e;
}

double norm_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

AggCoeffMatrix::AggCoeffMatrix(Matrix entries) : entries_(std::move(entries)) {
  if (entries_.rows < 1 || entries_.cols < 1) {
    throw DimensionError("AggCoeffMatrix: need s >= 1 and n >= 1, got " + entries_.shape_string());
  }
}

// ---------------------------------------------------------------------------
// Rank

std::vector<double> singular_values(const Matrix& m) {
  if (m.size() == 0) return {};
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  const auto& sv = svd.singularValues();
  return {sv.data(), sv.data() + sv.size()};
}

double default_rank_tolerance(const Matrix& m) {
  const auto sv = singular_values(m);
  const double smax = sv.empty() ? 0.0 : sv.front();
  return 1e-9 * static_cast<double>(std::max(m.rows, m.cols)) * smax;
}

std::size_t numerical_rank(const Matrix& m, std::optional<double> tol) {
  const auto sv = singular_values(m);
  if (sv.empty()) return 0;
  const double t = tol.value_or(1e-9 * static_cast<double>(std::max(m.rows, m.cols)) * sv.front());
  return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [t](double s) { return s > t; }));
}

Matrix null_space(const Matrix& m, std::optional<double> tol) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m), Eigen::ComputeFullV);
  const std::size_t rank = numerical_rank(m, tol);
  const auto& v = svd.matrixV();
  const std::size_t n = m.cols;
  Matrix basis(n, n - rank);
  for (std::size_t k = rank; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) basis(i, k - rank) = v(static_cast<long>(i), static_cast<long>(k));
  return basis;
}

Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  if (top.cols != bottom.cols) {
    throw DimensionError("stack_rows: column counts differ " + top.shape_string() + " vs " + bottom.shape_string());
  }
  Matrix out(top.rows + bottom.rows, top.cols);
  std::copy(top.data.begin(), top.data.end(), out.data.begin());
  std::copy(bottom.data.begin(), bottom.data.end(), out.data.begin() + static_cast<long>(top.size()));
  return out;
}

Matrix concat_columns(const Matrix& left, const Matrix& right) {
  if (left.rows != right.rows) {
    throw DimensionError("concat_columns: row counts differ " + left.shape_string() + " vs " + right.shape_string());
  }
  Matrix out(left.rows, left.cols + right.cols);
  for (std::size_t r = 0; r < left.rows; ++r) {
    std::copy(left.row(r).begin(), left.row(r).end(), out.row(r).begin());
    std::copy(right.row(r).begin(), right.row(r).end(), out.row(r).begin() + static_cast<long>(left.cols));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multisets

MultisetSample::MultisetSample(std::vector<std::vector<double>> elements) : elements_(std::move(elements)) {
  if (elements_.empty()) throw std::invalid_argument("MultisetSample: must be nonempty");
  for (const auto& e : elements_)
    if (e.size() != elements_.front().size() || e.empty())
      throw DimensionError("MultisetSample: elements must share a nonzero width");
}

MultisetSample MultisetSample::scalars(std::vector<double> values) {
  std::vector<std::vector<double>> e;
  e.reserve(values.size());
  for (double v : values) e.push_back({v});
  return MultisetSample(std::move(e));
}

bool MultisetSample::is_zero() const {
  return std::all_of(elements_.begin(), elements_.end(),
                     [](const auto& e) { return std::all_of(e.begin(), e.end(), [](double v) { return v == 0.0; }); });
}

MultisetSample MultisetSample::canonical() const {
  auto sorted = elements_;
  std::sort(sorted.begin(), sorted.end());
  return MultisetSample(std::move(sorted));
}

MultisetSample MultisetSample::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != elements_.size()) throw DimensionError("MultisetSample::permuted: wrong permutation length");
  std::vector<std::vector<double>> out(elements_.size());
  std::vector<bool> seen(elements_.size(), false);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw std::invalid_argument("MultisetSample::permuted: not a bijection");
    seen[perm[i]] = true;
    out[perm[i]] = elements_[i];
  }
  return MultisetSample(std::move(out));
}

Matrix MultisetSample::canonical_matrix() const {
  const MultisetSample c = canonical();
  return Matrix::from_rows(c.elements_);
}

bool MultisetSample::same_multiset(const MultisetSample& other) const {
  return size() == other.size() && canonical().elements_ == other.canonical().elements_;
}

std::string MultisetSample::to_string() const {
  std::ostringstream os;
  os << "{";
  const auto c = canonical();
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (i) os << ",";
    const auto& e = c.elements_[i];
    if (e.size() == 1) {
      os << e[0];
    } else {
      os << "(";
      for (std::size_t j = 0; j < e.size(); ++j) os << (j ? "," : "") << e[j];
      os << ")";
    }
  }
  os << "}";
  return os.str();
}

std::vector<double> apply_agg(const AggCoeffMatrix& m, const MultisetSample& x, std::span<const std::size_t> perm) {
  if (x.size() != m.n()) {
    throw DimensionError("apply_agg: multiset of size " + std::to_string(x.size()) + " for M with n = " +
                         std::to_string(m.n()));
  }
  // x_pi is the presented order; P_pi maps it back to canonical order so that
  // column j of M always meets the j-th canonical element.
  const MultisetSample presented = x.permuted(perm);
  const Matrix h = presented.canonical_matrix();
  const Matrix r = matmul(m.entries(), h);
  std::vector<double> out(r.size());
  for (std::size_t j = 0; j < r.cols; ++j)
    for (std::size_t i = 0; i < r.rows; ++i) out[j * r.rows + i] = r(i, j);
  return out;
}

std::vector<double> apply_agg(const AggCoeffMatrix& m, const MultisetSample& x) {
  std::vector<std::size_t> id(x.size());
  std::iota(id.begin(), id.end(), 0);
  return apply_agg(m, x, id);
}

// ---------------------------------------------------------------------------
// Aggregators

Aggregator::Aggregator(std::string name, Fn fn, SizePredicate accepts, std::vector<Aggregator> components)
    : name_(std::move(name)), fn_(std::move(fn)), accepts_(std::move(accepts)), components_(std::move(components)) {}

Aggregator Aggregator::basic(BasicKind kind) {
  auto column_reduce = [](const MultisetSample& x, auto&& reduce) {
    std::vector<double> out(x.width());
    for (std::size_t j = 0; j < x.width(); ++j) {
      std::vector<double> col;
      col.reserve(x.size());
      for (const auto& e : x.elements()) col.push_back(e[j]);
      out[j] = reduce(col);
    }
    return out;
  };
  switch (kind) {
    case BasicKind::Sum:
      return Aggregator("SUM", [column_reduce](const MultisetSample& x) {
        return column_reduce(x, [](const std::vector<double>& c) { return std::accumulate(c.begin(), c.end(), 0.0); });
      });
    case BasicKind::Mean:
      return Aggregator("MEAN", [column_reduce](const MultisetSample& x) {
        return column_reduce(x, [](const std::vector<double>& c) {
          return std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
        });
      });
    case BasicKind::NMean:
      return Aggregator("nMEAN", [](const MultisetSample& x) {
        const auto c = x.canonical();
        const double n = static_cast<double>(x.size());
        std::vector<std::vector<double>> rest(c.elements().begin() + 1, c.elements().end());
        std::vector<double> sizes(rest.size(), n);
        return normalized_mean(c.elements().front(), n, rest, sizes);
      });
    case BasicKind::Max:
      return Aggregator("MAX", [column_reduce](const MultisetSample& x) {
        return column_reduce(x, [](const std::vector<double>& c) { return *std::max_element(c.begin(), c.end()); });
      });
    case BasicKind::Min:
      return Aggregator("MIN", [column_reduce](const MultisetSample& x) {
        return column_reduce(x, [](const std::vector<double>& c) { return *std::min_element(c.begin(), c.end()); });
      });
    case BasicKind::Std:
      return Aggregator("STD", [column_reduce](const MultisetSample& x) {
        return column_reduce(x, [](const std::vector<double>& c) {
          const double n = static_cast<double>(c.size());
          const double mu = std::accumulate(c.begin(), c.end(), 0.0) / n;
          double var = 0.0;
          for (double v : c) var += (v - mu) * (v - mu);
          return std::sqrt(var / n);
        });
      });
  }
  throw ContractError("Aggregator::basic: unknown kind");
}

Aggregator Aggregator::from_matrix(const AggCoeffMatrix& m, std::string name) {
  const std::size_t n = m.n();
  return Aggregator(
      std::move(name), [m](const MultisetSample& x) { return apply_agg(m, x); },
      [n](std::size_t size) { return size == n; });
}

Aggregator Aggregator::combine(std::vector<Aggregator> parts) {
  if (parts.empty()) throw ContractError("Aggregator::combine: no components");
  std::string name;
  for (const auto& p : parts) name += (name.empty() ? "" : "(x)") + p.name();
  auto fn = [parts](const MultisetSample& x) {
    std::vector<double> out;
    for (const auto& p : parts) {
      auto part = p(x);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  };
  auto accepts = [parts](std::size_t size) {
    return std::all_of(parts.begin(), parts.end(), [size](const Aggregator& p) { return p.accepts(size); });
  };
  return Aggregator(std::move(name), std::move(fn), std::move(accepts), std::move(parts));
}

Aggregator Aggregator::post_compose(const Aggregator& f, std::function<std::vector<double>(std::span<const double>)> g,
                                    std::string name) {
  return Aggregator(
      std::move(name), [f, g](const MultisetSample& x) { return g(f(x)); },
      [f](std::size_t size) { return f.accepts(size); });
}

Aggregator Aggregator::pre_transform(const Aggregator& f, const Matrix& t) {
  return Aggregator(
      f.name() + "(T.)",
      [f, t](const MultisetSample& x) {
        if (x.width() != t.cols) throw DimensionError("pre_transform: T has wrong column count");
        std::vector<std::vector<double>> mapped;
        for (const auto& e : x.elements()) {
          const Matrix y = matmul(t, Matrix::column(e));
          mapped.push_back(y.data);
        }
        return f(MultisetSample(std::move(mapped)));
      },
      [f](std::size_t size) { return f.accepts(size); });
}

Aggregator Aggregator::expanding(const Matrix& w, const std::vector<double>& b, AppendRows append) {
  if (b.size() != w.rows) throw DimensionError("Aggregator::expanding: bias length must equal W rows");
  std::string name = "ExpC-" + std::to_string(w.rows);
  if (append == AppendRows::One) name += "|[m||1]";
  if (append == AppendRows::OneAndInvDegree) name += "|[m||1||1/N]";
  return Aggregator(std::move(name), [w, b, append](const MultisetSample& x) {
    if (x.width() != w.cols) throw DimensionError("Aggregator::expanding: element width must equal W columns");
    const std::size_t extra = append == AppendRows::None ? 0 : (append == AppendRows::One ? 1 : 2);
    const std::size_t s = w.rows + extra;
    const std::size_t d = x.width();
    std::vector<double> out(s * d, 0.0);
    const double inv_n = 1.0 / static_cast<double>(x.size());
    for (const auto& e : x.elements()) {
      std::vector<double> c(s);
      for (std::size_t i = 0; i < w.rows; ++i) {
        double z = b[i];
        for (std::size_t j = 0; j < d; ++j) z += w(i, j) * e[j];
        c[i] = std::tanh(z);
      }
      if (extra >= 1) c[w.rows] = 1.0;
      if (extra >= 2) c[w.rows + 1] = inv_n;
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < s; ++i) out[j * s + i] += c[i] * e[j];
    }
    return out;
  });
}

std::vector<double> normalized_mean(std::span<const double> center, double center_size,
                                    const std::vector<std::vector<double>>& neighbors,
                                    std::span<const double> neighbor_sizes) {
  if (neighbors.size() != neighbor_sizes.size()) throw DimensionError("normalized_mean: one size per neighbor required");
  std::vector<double> out(center.size());
  const double sv = std::sqrt(center_size);
  for (std::size_t j = 0; j < center.size(); ++j) out[j] = center[j] / sv;
  for (std::size_t k = 0; k < neighbors.size(); ++k) {
    if (neighbors[k].size() != center.size()) throw DimensionError("normalized_mean: ragged feature widths");
    const double su = std::sqrt(neighbor_sizes[k]);
    for (std::size_t j = 0; j < center.size(); ++j) out[j] += neighbors[k][j] / su;
  }
  for (double& v : out) v /= sv;
  return out;
}

double multiset_distance_under(const Aggregator& agg, const MultisetSample& x1, const MultisetSample& x2) {
  return norm_diff(agg(x1), agg(x2));
}

// ---------------------------------------------------------------------------
// Oracles

std::vector<MultisetSample> enumerate_multisets(std::span<const double> grid, std::size_t max_size, std::size_t width,
                                                std::size_t min_size) {
  if (grid.empty()) throw std::invalid_argument("enumerate_multisets: grid is empty");
  if (max_size > kMaxOracleSize) {
    throw std::invalid_argument("enumerate_multisets: max_size " + std::to_string(max_size) + " exceeds " +
                                std::to_string(kMaxOracleSize));
  }
  // Points of grid^width in lexicographic order.
  std::vector<double> sorted_grid(grid.begin(), grid.end());
  std::sort(sorted_grid.begin(), sorted_grid.end());
  sorted_grid.erase(std::unique(sorted_grid.begin(), sorted_grid.end()), sorted_grid.end());
  std::vector<std::vector<double>> points;
  std::vector<std::size_t> digit(width, 0);
  const std::size_t g = sorted_grid.size();
  while (true) {
    std::vector<double> p(width);
    for (std::size_t j = 0; j < width; ++j) p[j] = sorted_grid[digit[j]];
    points.push_back(std::move(p));
    std::size_t k = width;
    while (k > 0 && ++digit[k - 1] == g) digit[--k] = 0;
    if (k == 0) break;
  }
  std::vector<MultisetSample> out;
  for (std::size_t size = std::max<std::size_t>(1, min_size); size <= max_size; ++size) {
    // Non-decreasing index sequences enumerate multisets in canonical form.
    std::vector<std::size_t> idx(size, 0);
    while (true) {
      std::vector<std::vector<double>> elems;
      for (std::size_t i : idx) elems.push_back(points[i]);
      out.emplace_back(std::move(elems));
      std::size_t k = size;
      while (k > 0 && idx[k - 1] == points.size() - 1) --k;
      if (k == 0) break;
      const std::size_t v = idx[k - 1] + 1;
      for (std::size_t j = k - 1; j < size; ++j) idx[j] = v;
    }
  }
  return out;
}

namespace {

struct Images {
  std::vector<const MultisetSample*> sets;
  std::vector<std::vector<double>> values;
};

Images image_table(const Aggregator& agg, const std::vector<MultisetSample>& universe, const SearchOptions& options) {
  Images im;
  for (const auto& x : universe) {
    if (!agg.accepts(x.size())) continue;
    if (options.exclude_zero && x.is_zero()) continue;
    im.sets.push_back(&x);
    im.values.push_back(agg(x));
  }
  return im;
}

}  // namespace

std::optional<Witness> collision_oracle(const Aggregator& agg1, const Aggregator& agg2, std::span<const double> grid,
                                        std::size_t max_size, const SearchOptions& options) {
  const auto universe = enumerate_multisets(grid, max_size, options.width);
  const Images a = image_table(agg1, universe, options);
  const Images b = image_table(agg2, universe, options);
  for (std::size_t i = 0; i < a.sets.size(); ++i) {
    for (std::size_t j = 0; j < b.sets.size(); ++j) {
      // Canonical forms are unique, so pointer identity is multiset identity.
      if (options.distinct && a.sets[i] == b.sets[j]) continue;
      if (options.same_size && a.sets[i]->size() != b.sets[j]->size()) continue;
      if (norm_diff(a.values[i], b.values[j]) < options.tol) return Witness{*a.sets[i], *b.sets[j]};
    }
  }
  return std::nullopt;
}

std::optional<Witness> separation_violation(const Aggregator& candidate, const Aggregator& weaker,
                                            std::span<const double> grid, std::size_t max_size,
                                            const SearchOptions& options) {
  const auto universe = enumerate_multisets(grid, max_size, options.width);
  std::vector<const MultisetSample*> sets;
  std::vector<std::vector<double>> cv, wv;
  for (const auto& x : universe) {
    if (!candidate.accepts(x.size()) || !weaker.accepts(x.size())) continue;
    if (options.exclude_zero && x.is_zero()) continue;
    sets.push_back(&x);
    cv.push_back(candidate(x));
    wv.push_back(weaker(x));
  }
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t j = i + 1; j < sets.size(); ++j) {
      if (options.same_size && sets[i]->size() != sets[j]->size()) continue;
      if (norm_diff(wv[i], wv[j]) >= options.tol && norm_diff(cv[i], cv[j]) < options.tol) {
        return Witness{*sets[i], *sets[j]};
      }
    }
  }
  return std::nullopt;
}

std::string to_string(Strength s) {
  switch (s) {
    case Strength::Stronger: return "stronger";
    case Strength::Weaker: return "weaker";
    case Strength::Equal: return "equal";
    case Strength::Incomparable: return "incomparable";
  }
  return "?";
}

StrengthComparison compare_strength(const Aggregator& agg1, const Aggregator& agg2, std::span<const double> grid,
                                    std::size_t max_size, const SearchOptions& options) {
  StrengthComparison out;
  out.first_only = separation_violation(agg2, agg1, grid, max_size, options);
  out.second_only = separation_violation(agg1, agg2, grid, max_size, options);
  if (out.first_only && out.second_only) {
    out.relation = Strength::Incomparable;
  } else if (out.first_only) {
    out.relation = Strength::Stronger;
  } else if (out.second_only) {
    out.relation = Strength::Weaker;
  } else {
    out.relation = Strength::Equal;
  }
  return out;
}

bool check_equivariance(const Aggregator& agg, const Matrix& t, const MultisetSample& x) {
  if (t.cols != x.width()) throw DimensionError("check_equivariance: T must have one column per element coordinate");
  const auto direct = agg(x);
  if (direct.size() != t.cols) throw DimensionError("check_equivariance: aggregator output width differs from d");
  const Matrix mapped = matmul(t, Matrix::column(direct));
  const auto transformed = Aggregator::pre_transform(agg, t)(x);
  return norm_diff(transformed, mapped.data) < 1e-9;
}

bool strictly_stronger_by_stack(const AggCoeffMatrix& m, const AggCoeffMatrix& extra) {
  if (m.n() != extra.n()) throw DimensionError("strictly_stronger_by_stack: column counts differ");
  return numerical_rank(stack_rows(m.entries(), extra.entries())) > numerical_rank(m);
}

bool is_injective_for_size(const AggCoeffMatrix& m) { return numerical_rank(m) == m.n(); }

bool ranges_disjoint_certificate(const AggCoeffMatrix& m1, const AggCoeffMatrix& m2) {
  if (m1.s() != m2.s()) throw DimensionError("ranges_disjoint_certificate: row counts differ");
  return numerical_rank(concat_columns(m1.entries(), m2.entries())) == m1.n() + m2.n();
}

std::optional<Witness> collision_from_kernel(const AggCoeffMatrix& m) {
  const Matrix kernel = null_space(m.entries());
  if (kernel.cols == 0) return std::nullopt;
  const std::size_t n = m.n();
  double zmax = 0.0;
  for (std::size_t i = 0; i < n; ++i) zmax = std::max(zmax, std::abs(kernel(i, 0)));
  // Base points are 1 apart; a shift of at most 0.4 per coordinate keeps both
  // vectors strictly increasing, so both stay in canonical order.
  const double step = 0.4 / zmax;
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = static_cast<double>(i + 1);
    b[i] = a[i] + step * kernel(i, 0);
  }
  Witness w{MultisetSample::scalars(a), MultisetSample::scalars(b)};
  if (norm_diff(apply_agg(m, w.first), apply_agg(m, w.second)) >= 1e-9) return std::nullopt;
  return w;
}

std::optional<Witness> cross_collision_from_kernel(const AggCoeffMatrix& m1, const AggCoeffMatrix& m2) {
  const Matrix stacked = concat_columns(m1.entries(), m2.entries());
  const Matrix kernel = null_space(stacked);
  const std::size_t n1 = m1.n();
  std::vector<std::vector<double>> candidates;
  for (std::size_t k = 0; k < kernel.cols; ++k) {
    std::vector<double> z(kernel.rows);
    for (std::size_t i = 0; i < kernel.rows; ++i) z[i] = kernel(i, k);
    candidates.push_back(z);
    for (double& v : z) v = -v;
    candidates.push_back(z);
  }
  for (std::size_t k = 0; k + 1 < kernel.cols; ++k)
    for (double sign : {1.0, -1.0})
      for (double sign2 : {1.0, -1.0}) {
        std::vector<double> z(kernel.rows);
        for (std::size_t i = 0; i < kernel.rows; ++i) z[i] = sign * kernel(i, k) + sign2 * kernel(i, k + 1);
        candidates.push_back(z);
      }
  for (const auto& z : candidates) {
    // [M1 M2] (a; -b) = 0  <=>  M1 a = M2 b.
    std::vector<double> a(z.begin(), z.begin() + static_cast<long>(n1));
    std::vector<double> b(z.begin() + static_cast<long>(n1), z.end());
    for (double& v : b) v = -v;
    if (!std::is_sorted(a.begin(), a.end()) || !std::is_sorted(b.begin(), b.end())) continue;
    auto nonzero = [](const std::vector<double>& v) {
      return std::any_of(v.begin(), v.end(), [](double x) { return std::abs(x) > 1e-12; });
    };
    if (!nonzero(a) || !nonzero(b)) continue;
    Witness w{MultisetSample::scalars(a), MultisetSample::scalars(b)};
    if (norm_diff(apply_agg(m1, w.first), apply_agg(m2, w.second)) < 1e-9) return w;
  }
  return std::nullopt;
}

RankReport rank_preservation_report(const AggCoeffMatrix& m, const Matrix& h) {
  if (m.n() != h.rows) {
    throw DimensionError("rank_preservation_report: M " + m.entries().shape_string() + " vs H " + h.shape_string());
  }
  return {numerical_rank(m), numerical_rank(h), numerical_rank(matmul(m.entries(), h))};
}

}  // namespace agglab
