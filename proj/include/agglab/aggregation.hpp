#pragma once

#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "agglab/tensor.hpp"

namespace agglab {

/// Aggregation coefficient matrix M (s x n): column j weighs the j-th element
/// of a multiset of size n taken in canonical order.
class AggCoeffMatrix {
 public:
  explicit AggCoeffMatrix(Matrix entries);
  static AggCoeffMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    return AggCoeffMatrix(Matrix::from_rows(rows));
  }

  const Matrix& entries() const { return entries_; }
  std::size_t s() const { return entries_.rows; }
  std::size_t n() const { return entries_.cols; }

 private:
  Matrix entries_;
};

std::vector<double> singular_values(const Matrix& m);
/// 1e-9 * max(rows, cols) * sigma_max.
double default_rank_tolerance(const Matrix& m);
/// Number of singular values above `tol` (default_rank_tolerance when absent).
std::size_t numerical_rank(const Matrix& m, std::optional<double> tol = {});
inline std::size_t numerical_rank(const AggCoeffMatrix& m, std::optional<double> tol = {}) {
  return numerical_rank(m.entries(), tol);
}
/// Orthonormal basis of the right null space, one basis vector per column.
Matrix null_space(const Matrix& m, std::optional<double> tol = {});
Matrix stack_rows(const Matrix& top, const Matrix& bottom);
Matrix concat_columns(const Matrix& left, const Matrix& right);

/// A multiset of equal-width f64 vectors. Stored order is incidental; the
/// canonical order is lexicographic.
class MultisetSample {
 public:
  explicit MultisetSample(std::vector<std::vector<double>> elements);
  static MultisetSample scalars(std::vector<double> values);
  static MultisetSample scalars(std::initializer_list<double> values) { return scalars(std::vector<double>(values)); }

  const std::vector<std::vector<double>>& elements() const { return elements_; }
  std::size_t size() const { return elements_.size(); }
  std::size_t width() const { return elements_.front().size(); }
  bool is_zero() const;

  MultisetSample canonical() const;
  MultisetSample permuted(std::span<const std::size_t> perm) const;
  /// Canonical elements as an n x d matrix.
  Matrix canonical_matrix() const;
  bool same_multiset(const MultisetSample& other) const;
  std::string to_string() const;

 private:
  std::vector<std::vector<double>> elements_;
};

/// vec(M_pi x_pi^T) for the elements of `x` presented in the order `perm`.
/// The columns of M follow the canonical ordering, so the result does not
/// depend on `perm`.
std::vector<double> apply_agg(const AggCoeffMatrix& m, const MultisetSample& x, std::span<const std::size_t> perm);
std::vector<double> apply_agg(const AggCoeffMatrix& m, const MultisetSample& x);

enum class BasicKind { Sum, Mean, NMean, Max, Min, Std };

/// Extra constant coefficient rows appended to a learned coefficient vector.
enum class AppendRows { None, One, OneAndInvDegree };

/// Permutation-invariant map from multisets to fixed-width vectors, possibly
/// restricted to some multiset sizes.
class Aggregator {
 public:
  using Fn = std::function<std::vector<double>(const MultisetSample&)>;
  using SizePredicate = std::function<bool(std::size_t)>;

  Aggregator(std::string name, Fn fn, SizePredicate accepts = {}, std::vector<Aggregator> components = {});

  /// SUM, MEAN, MAX, MIN, STD (population, per coordinate) and nMEAN. Over a
  /// bare multiset nMEAN sees every neighborhood with size |x|.
  static Aggregator basic(BasicKind kind);
  static Aggregator sum() { return basic(BasicKind::Sum); }
  static Aggregator mean() { return basic(BasicKind::Mean); }
  /// f_M over multisets of size M.n().
  static Aggregator from_matrix(const AggCoeffMatrix& m, std::string name = "f_M");
  /// Concatenation of component outputs.
  static Aggregator combine(std::vector<Aggregator> parts);
  /// g o f.
  static Aggregator post_compose(const Aggregator& f, std::function<std::vector<double>(std::span<const double>)> g,
                                 std::string name);
  /// f applied to {{T x_i}}.
  static Aggregator pre_transform(const Aggregator& f, const Matrix& t);
  /// sum_u vec(c_u x_u^T) with c_u = [Tanh(W x_u + b) || extra rows].
  static Aggregator expanding(const Matrix& w, const std::vector<double>& b, AppendRows append);

  std::vector<double> operator()(const MultisetSample& x) const { return fn_(x); }
  bool accepts(std::size_t size) const { return !accepts_ || accepts_(size); }
  const std::string& name() const { return name_; }
  bool is_combined() const { return !components_.empty(); }
  const std::vector<Aggregator>& components() const { return components_; }

 private:
  std::string name_;
  Fn fn_;
  SizePredicate accepts_;
  std::vector<Aggregator> components_;
};

/// sqrt(1/|N(v)|) * (h_v / sqrt(|N(v)|) + sum_u h_u / sqrt(|N(u)|)), the
/// symmetric GCN normalization.
std::vector<double> normalized_mean(std::span<const double> center, double center_size,
                                    const std::vector<std::vector<double>>& neighbors,
                                    std::span<const double> neighbor_sizes);

/// ||agg(x1) - agg(x2)||_2; infinity when output widths differ.
double multiset_distance_under(const Aggregator& agg, const MultisetSample& x1, const MultisetSample& x2);

/// Every multiset with elements from grid^width and size in [min_size, max_size],
/// each listed once in canonical form.
std::vector<MultisetSample> enumerate_multisets(std::span<const double> grid, std::size_t max_size,
                                                std::size_t width = 1, std::size_t min_size = 1);

struct Witness {
  MultisetSample first;
  MultisetSample second;
};

struct SearchOptions {
  std::size_t width = 1;
  /// Only compare multisets of equal size.
  bool same_size = false;
  /// Skip multisets whose elements are all zero.
  bool exclude_zero = false;
  /// Require x1 != x2. Turn off when intersecting the ranges of two different
  /// aggregators, where f1(x) == f2(x) is itself a collision.
  bool distinct = true;
  double tol = 1e-9;
};

inline constexpr std::size_t kMaxOracleSize = 5;

/// First pair (x1, x2), x1 != x2 as multisets (see SearchOptions::distinct), with ||agg1(x1) - agg2(x2)|| < tol.
std::optional<Witness> collision_oracle(const Aggregator& agg1, const Aggregator& agg2, std::span<const double> grid,
                                        std::size_t max_size, const SearchOptions& options = {});

/// A pair separated by `weaker` yet merged by `candidate`, i.e. a refutation of
/// candidate >= weaker on the grid. Only pairs both aggregators accept count.
std::optional<Witness> separation_violation(const Aggregator& candidate, const Aggregator& weaker,
                                            std::span<const double> grid, std::size_t max_size,
                                            const SearchOptions& options = {});

enum class Strength { Stronger, Weaker, Equal, Incomparable };
std::string to_string(Strength s);

struct StrengthComparison {
  Strength relation = Strength::Equal;
  /// Separated by agg1, merged by agg2.
  std::optional<Witness> first_only;
  /// Separated by agg2, merged by agg1.
  std::optional<Witness> second_only;
};

StrengthComparison compare_strength(const Aggregator& agg1, const Aggregator& agg2, std::span<const double> grid,
                                    std::size_t max_size, const SearchOptions& options = {});

/// agg({{T x_i}}) == T agg({{x_i}}) within 1e-9.
bool check_equivariance(const Aggregator& agg, const Matrix& t, const MultisetSample& x);

/// rank(stack(M, M_extra)) > rank(M).
bool strictly_stronger_by_stack(const AggCoeffMatrix& m, const AggCoeffMatrix& extra);
/// rank(M) == n.
bool is_injective_for_size(const AggCoeffMatrix& m);
/// rank([M1 M2]) == n1 + n2.
bool ranges_disjoint_certificate(const AggCoeffMatrix& m1, const AggCoeffMatrix& m2);

/// Two distinct size-n multisets that f_M merges, built from a null vector of M.
/// Empty when M has full column rank.
std::optional<Witness> collision_from_kernel(const AggCoeffMatrix& m);
/// Nonzero multisets x1 (size n1), x2 (size n2) with f_M1(x1) == f_M2(x2),
/// built from the kernel of [M1 M2]. Empty if no kernel combination tried
/// has both halves in canonical order.
std::optional<Witness> cross_collision_from_kernel(const AggCoeffMatrix& m1, const AggCoeffMatrix& m2);

struct RankReport {
  std::size_t rank_m = 0;
  std::size_t rank_h = 0;
  std::size_t rank_mh = 0;
};
RankReport rank_preservation_report(const AggCoeffMatrix& m, const Matrix& h);

}  // namespace agglab
