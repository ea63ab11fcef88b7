#include "agglab/verify.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "agglab/graph.hpp"
#include "agglab/layers.hpp"

namespace agglab {

using nlohmann::json;

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

json multiset_json(const MultisetSample& x) {
  json out = json::array();
  const MultisetSample c = x.canonical();
  for (const auto& e : c.elements()) out.push_back(e.size() == 1 ? json(e[0]) : json(e));
  return out;
}

// Reference trial count at --trials 20, scaled proportionally.
std::size_t scaled(std::size_t trials, std::size_t reference) {
  return std::max<std::size_t>(1, (trials * reference + 19) / 20);
}

double norm_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> sorted_grid_sample(std::size_t n, std::span<const double> grid, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
  std::vector<double> v(n);
  for (double& x : v) x = grid[pick(rng)];
  std::sort(v.begin(), v.end());
  return v;
}

// G (I - z z^T / |z|^2): random rows orthogonal to z.
Matrix rows_orthogonal_to(std::size_t s, const std::vector<double>& z, Rng& rng) {
  const std::size_t n = z.size();
  double zz = 0.0;
  for (double v : z) zz += v * v;
  Matrix proj = Matrix::identity(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) proj(i, j) -= z[i] * z[j] / zz;
  return matmul(random_normal(s, n, rng), proj);
}

// Properties live in a deque so references handed out by add() stay valid.
class SuiteBuilder {
 public:
  explicit SuiteBuilder(std::string name) : name_(std::move(name)) {}

  PropertyResult& add(std::string property) {
    props_.emplace_back();
    props_.back().property = std::move(property);
    return props_.back();
  }
  SuiteResult take() { return {name_, {std::make_move_iterator(props_.begin()), std::make_move_iterator(props_.end())}}; }

 private:
  std::string name_;
  std::deque<PropertyResult> props_;
};

// Tallies a trial; the first failing matrix / witness is kept.
void record(PropertyResult& p, bool ok, const std::optional<Matrix>& m = {}, const std::optional<Witness>& w = {}) {
  ++p.trials;
  if (ok) {
    ++p.passed;
    return;
  }
  if (p.trials - p.passed == 1) {
    p.matrix = m;
    p.witness = w;
  }
}

void finish(PropertyResult& p, std::size_t required) {
  p.verdict = p.passed >= required && p.trials > 0;
  if (p.detail.empty()) p.detail = std::to_string(p.passed) + "/" + std::to_string(p.trials) + " trials passed";
}
void finish_all(PropertyResult& p) { finish(p, p.trials); }

void note_deviation(PropertyResult& p, double dev) {
  p.max_deviation = std::max(p.max_deviation.value_or(0.0), dev);
}

Graph random_graph(std::size_t n, double p, std::size_t width, Rng& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (coin(rng)) edges.emplace_back(u, v);
  return Graph(n, std::move(edges), random_normal(n, width, rng));
}

const std::vector<double> kGrid4 = {-1.0, 0.0, 1.0, 2.0};
const std::vector<double> kGrid012 = {0.0, 1.0, 2.0};

bool same_pair(const Witness& w, const MultisetSample& a, const MultisetSample& b) {
  return (w.first.same_multiset(a) && w.second.same_multiset(b)) || (w.first.same_multiset(b) && w.second.same_multiset(a));
}

Aggregator random_basic_combination(Rng& rng, std::size_t& width) {
  static const std::vector<BasicKind> kinds = {BasicKind::Sum, BasicKind::Mean, BasicKind::Max, BasicKind::Min,
                                               BasicKind::Std};
  std::vector<std::size_t> idx = random_permutation(kinds.size(), rng);
  std::uniform_int_distribution<std::size_t> count(2, 3);
  idx.resize(count(rng));
  std::sort(idx.begin(), idx.end());
  std::vector<Aggregator> parts;
  for (std::size_t i : idx) parts.push_back(Aggregator::basic(kinds[i]));
  width = parts.size();
  return Aggregator::combine(std::move(parts));
}

}  // namespace

std::string PropertyResult::to_json() const {
  json j;
  j["property"] = property;
  j["matrix"] = matrix ? matrix_json(*matrix) : json(nullptr);
  j["verdict"] = verdict;
  j["witness"] = witness ? json{{"first", multiset_json(witness->first)}, {"second", multiset_json(witness->second)}}
                         : json(nullptr);
  j["passed"] = passed;
  j["trials"] = trials;
  j["max_deviation"] = max_deviation ? json(*max_deviation) : json(nullptr);
  j["detail"] = detail;
  return j.dump();
}

bool SuiteResult::passed() const {
  return std::all_of(properties.begin(), properties.end(), [](const PropertyResult& p) { return p.verdict; });
}

MergingMatrix random_merging_matrix(std::size_t s, std::size_t n, std::span<const double> grid, Rng& rng) {
  if (n < 2 || grid.size() < 2) throw ContractError("random_merging_matrix: needs n >= 2 and two grid values");
  for (;;) {
    const auto a = sorted_grid_sample(n, grid, rng);
    const auto b = sorted_grid_sample(n, grid, rng);
    if (a == b) continue;
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = a[i] - b[i];
    return {AggCoeffMatrix(rows_orthogonal_to(s, z, rng)), {MultisetSample::scalars(a), MultisetSample::scalars(b)}};
  }
}

CrossMergingPair random_cross_merging_pair(std::size_t s, std::size_t n1, std::size_t n2,
                                           std::span<const double> grid, Rng& rng) {
  for (;;) {
    const auto a = sorted_grid_sample(n1, grid, rng);
    const auto b = sorted_grid_sample(n2, grid, rng);
    auto nonzero = [](const std::vector<double>& v) { return std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; }); };
    if (!nonzero(a) || !nonzero(b)) continue;
    std::vector<double> z = a;
    for (double v : b) z.push_back(-v);
    const Matrix full = rows_orthogonal_to(s, z, rng);
    Matrix m1(s, n1), m2(s, n2);
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < n1; ++c) m1(r, c) = full(r, c);
      for (std::size_t c = 0; c < n2; ++c) m2(r, c) = full(r, n1 + c);
    }
    return {AggCoeffMatrix(m1), AggCoeffMatrix(m2), {MultisetSample::scalars(a), MultisetSample::scalars(b)}};
  }
}

// ---------------------------------------------------------------------------

SuiteResult verify_lemma1(const VerifyOptions& options) {
  SuiteBuilder suite("lemma1");
  Rng rng(options.seed * 1000 + 1);

  PropertyResult& proj = suite.add("lemma1_i_projection");
  for (std::size_t t = 0; t < options.trials; ++t) {
    std::size_t width = 0;
    const Aggregator f = random_basic_combination(rng, width);
    auto keep = random_permutation(width, rng);
    keep.resize(1 + rng() % (width - 1));
    const Aggregator g = Aggregator::post_compose(
        f,
        [keep](std::span<const double> y) {
          std::vector<double> out;
          for (std::size_t i : keep) out.push_back(y[i]);
          return out;
        },
        "proj");
    const auto v = separation_violation(f, g, kGrid4, 3);
    record(proj, !v, {}, v);
  }
  finish_all(proj);

  PropertyResult& inj = suite.add("lemma1_i_injective_post_composition");
  for (std::size_t t = 0; t < options.trials; ++t) {
    std::size_t width = 0;
    const Aggregator f = random_basic_combination(rng, width);
    const double a = std::uniform_real_distribution<double>(0.5, 2.0)(rng) * (rng() % 2 ? 1.0 : -1.0);
    const double b = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    const Aggregator g = Aggregator::post_compose(
        f,
        [a, b](std::span<const double> y) {
          std::vector<double> out(y.begin(), y.end());
          for (double& v : out) v = a * v + b;
          return out;
        },
        "affine");
    const auto cmp = compare_strength(f, g, kGrid4, 3);
    record(inj, cmp.relation == Strength::Equal, {}, cmp.first_only ? cmp.first_only : cmp.second_only);
  }
  finish_all(inj);

  const Aggregator sum = Aggregator::sum(), mean = Aggregator::mean();
  const Aggregator both = Aggregator::combine({sum, mean});
  {
    PropertyResult& p = suite.add("lemma1_ii_sum_mean_stronger_than_sum");
    const auto cmp = compare_strength(both, sum, kGrid012, 4);
    const auto x1 = MultisetSample::scalars({1, 1}), x2 = MultisetSample::scalars({2});
    const bool explicit_pair = multiset_distance_under(sum, x1, x2) < 1e-12 && multiset_distance_under(both, x1, x2) > 0.5;
    record(p, cmp.relation == Strength::Stronger && explicit_pair);
    p.witness = Witness{x1, x2};
    finish_all(p);
    p.detail = "relation " + to_string(cmp.relation) + "; {1,1} vs {2} merged by SUM, separated by SUM(x)MEAN";
  }
  {
    PropertyResult& p = suite.add("lemma1_ii_sum_mean_stronger_than_mean");
    const auto cmp = compare_strength(both, mean, kGrid012, 4);
    const auto x1 = MultisetSample::scalars({1, 2}), x2 = MultisetSample::scalars({1, 1, 2, 2});
    const bool explicit_pair =
        multiset_distance_under(mean, x1, x2) < 1e-12 && multiset_distance_under(both, x1, x2) > 0.5;
    record(p, cmp.relation == Strength::Stronger && explicit_pair);
    p.witness = Witness{x1, x2};
    finish_all(p);
    p.detail = "relation " + to_string(cmp.relation) + "; {1,2} vs {1,1,2,2} merged by MEAN, separated by SUM(x)MEAN";
  }
  {
    PropertyResult& p = suite.add("lemma1_sum_mean_incomparable");
    const auto cmp = compare_strength(sum, mean, kGrid012, 4);
    record(p, cmp.relation == Strength::Incomparable);
    p.witness = cmp.second_only;
    finish_all(p);
    p.detail = "relation " + to_string(cmp.relation);
  }

  PropertyResult& pre = suite.add("lemma1_iii_rank_deficient_pre_transform");
  const std::vector<double> grid3 = {-1.0, 0.0, 1.0};
  SearchOptions vec2;
  vec2.width = 2;
  for (std::size_t t = 0; t < options.trials; ++t) {
    // Alternate a rank-1 square T and a wide T.
    const Matrix tm = t % 2 == 0 ? matmul(random_normal(2, 1, rng), random_normal(1, 2, rng)) : random_normal(1, 2, rng);
    for (const Aggregator& f : {sum, mean}) {
      const auto v = separation_violation(f, Aggregator::pre_transform(f, tm), grid3, 3, vec2);
      record(pre, !v, tm, v);
    }
  }
  finish_all(pre);

  PropertyResult& eq = suite.add("equivariance_sum_mean_not_max");
  for (std::size_t t = 0; t < options.trials; ++t) {
    const Matrix tm = random_normal(3, 2, rng);
    std::vector<std::vector<double>> els;
    for (std::size_t k = 0; k < 1 + t % 4; ++k) els.push_back(random_normal(1, 2, rng).data);
    const MultisetSample x(els);
    record(eq, check_equivariance(sum, tm, x) && check_equivariance(mean, tm, x), tm);
  }
  const bool max_fails = !check_equivariance(Aggregator::basic(BasicKind::Max), Matrix::from_rows({{-1.0}}),
                                             MultisetSample::scalars({1, 2}));
  record(eq, max_fails);
  finish_all(eq);
  return suite.take();
}

SuiteResult verify_prop1(const VerifyOptions& options) {
  SuiteBuilder suite("prop1");
  Rng rng(options.seed * 1000 + 2);
  std::uniform_int_distribution<std::size_t> n_dist(1, 3);

  PropertyResult& stack = suite.add("prop1_i_stack_never_weaker");
  for (std::size_t t = 0; t < options.trials; ++t) {
    const std::size_t n = 1 + t % 3;
    const std::size_t s = 1 + rng() % n, s2 = 1 + rng() % n;
    const AggCoeffMatrix m = n >= 2 && t % 2 == 0 ? random_merging_matrix(s, n, kGrid4, rng).m
                                                  : AggCoeffMatrix(random_normal(s, n, rng));
    const AggCoeffMatrix extra(random_normal(s2, n, rng));
    const AggCoeffMatrix stacked(stack_rows(m.entries(), extra.entries()));
    const auto v = separation_violation(Aggregator::from_matrix(stacked), Aggregator::from_matrix(m), kGrid4, 3);
    record(stack, !v, stacked.entries(), v);
  }
  finish_all(stack);

  PropertyResult& strict = suite.add("prop1_ii_rank_growth_iff_strictly_stronger");
  std::size_t certified = 0;
  for (std::size_t t = 0; t < options.trials; ++t) {
    const std::size_t n = 2 + t % 2;
    const std::size_t s = 1 + rng() % (n - 1);
    const auto base = random_merging_matrix(s, n, kGrid4, rng);
    const std::size_t s2 = 1 + rng() % n;
    const Matrix extra = t % 2 == 0 ? matmul(random_normal(s2, s, rng), base.m.entries()) : random_normal(s2, n, rng);
    const bool certificate = strictly_stronger_by_stack(base.m, AggCoeffMatrix(extra));
    const AggCoeffMatrix stacked(stack_rows(base.m.entries(), extra));
    // A pair the stack separates and M merges.
    const auto gained =
        separation_violation(Aggregator::from_matrix(base.m), Aggregator::from_matrix(stacked), kGrid4, 3);
    certified += certificate;
    record(strict, certificate == gained.has_value(), stacked.entries(), gained);
  }
  finish_all(strict);
  strict.detail += "; " + std::to_string(certified) + " with rank growth";

  PropertyResult& agree = suite.add("prop1_iii_injectivity_matches_oracle");
  PropertyResult& kernel = suite.add("prop1_iii_kernel_collision");
  SearchOptions same;
  same.same_size = true;
  const std::size_t cases = scaled(options.trials, 100);
  for (std::size_t t = 0; t < cases; ++t) {
    AggCoeffMatrix m(Matrix(1, 1, 1.0));
    if (t % 2 == 0) {
      const std::size_t n = 2 + rng() % 2;
      m = random_merging_matrix(1 + rng() % 3, n, kGrid4, rng).m;
    } else {
      const std::size_t n = n_dist(rng);
      m = AggCoeffMatrix(random_normal(n + rng() % (4 - n), n, rng));
    }
    const bool injective = is_injective_for_size(m);
    const auto f = Aggregator::from_matrix(m);
    const auto collision = collision_oracle(f, f, kGrid4, m.n(), same);
    record(agree, injective == !collision.has_value(), m.entries(), collision);
    if (!injective) {
      const auto w = collision_from_kernel(m);
      const bool ok = w && !w->first.same_multiset(w->second) &&
                      norm_diff(apply_agg(m, w->first), apply_agg(m, w->second)) < 1e-9;
      if (w) note_deviation(kernel, norm_diff(apply_agg(m, w->first), apply_agg(m, w->second)));
      record(kernel, ok, m.entries(), w);
    }
  }
  finish_all(agree);
  finish_all(kernel);

  {
    PropertyResult& p = suite.add("prop1_iii_sum_collision");
    const AggCoeffMatrix ones = AggCoeffMatrix::from_rows({{1.0, 1.0}});
    const auto f = Aggregator::from_matrix(ones, "SUM");
    const auto w = collision_oracle(f, f, kGrid012, 2, same);
    const bool ok = !is_injective_for_size(ones) && w &&
                    same_pair(*w, MultisetSample::scalars({0, 2}), MultisetSample::scalars({1, 1}));
    record(p, ok, ones.entries(), w);
    p.matrix = ones.entries();
    p.witness = w;
    finish_all(p);
  }
  {
    PropertyResult& p = suite.add("prop1_iii_vandermonde_injective");
    const AggCoeffMatrix v = AggCoeffMatrix::from_rows({{1, 1, 1}, {1, 2, 3}, {1, 4, 9}});
    const auto f = Aggregator::from_matrix(v);
    const auto w = collision_oracle(f, f, kGrid4, 3, same);
    record(p, is_injective_for_size(v) && !w, v.entries(), w);
    p.matrix = v.entries();
    finish_all(p);
  }

  PropertyResult& collapse = suite.add("rank_collapse_scalar_coefficients");
  for (std::size_t t = 0; t < scaled(options.trials, 100); ++t) {
    const Graph g = random_graph(6, 0.5, 3, rng);
    bool ok = true;
    for (LayerKind kind : {LayerKind::Gcn, LayerKind::Gin0})
      for (const auto& nc : scalar_coefficients(kind, g, g.node_features())) {
        ok = ok && numerical_rank(nc.coefficients) == 1 && numerical_rank(matmul(nc.coefficients, nc.features)) <= 1;
      }
    record(collapse, ok);
  }
  finish_all(collapse);

  PropertyResult& preserve = suite.add("rank_preservation_expc");
  const std::size_t rank_trials = scaled(options.trials, 100);
  for (std::size_t t = 0; t < rank_trials; ++t) {
    const std::size_t d = 2 + rng() % 2;
    LayerSpec spec;
    spec.kind = LayerKind::ExpC;
    spec.d_in = d;
    spec.d_out = d;
    spec.s = d + rng() % 2;
    Layer layer(spec, rng);
    const Graph g = random_graph(8, 0.5, d, rng);
    const auto coeffs = expc_coefficients(layer, g, g.node_features());
    const auto widest = std::max_element(coeffs.begin(), coeffs.end(), [](const auto& a, const auto& b) {
      return a.neighbors.size() < b.neighbors.size();
    });
    const RankReport r = rank_preservation_report(AggCoeffMatrix(widest->coefficients), widest->features);
    record(preserve, r.rank_mh == r.rank_h, widest->coefficients);
  }
  finish(preserve, (rank_trials * 9 + 9) / 10);
  preserve.detail += " (at least 90% required)";
  return suite.take();
}

SuiteResult verify_prop2(const VerifyOptions& options) {
  SuiteBuilder suite("prop2");
  Rng rng(options.seed * 1000 + 3);
  PropertyResult& subset = suite.add("prop2_i_stacked_intersection_subset");
  PropertyResult& growth = suite.add("prop2_ii_strict_subset_implies_rank_growth");
  std::size_t strict_cases = 0;
  const auto universe = enumerate_multisets(kGrid4, 2);
  for (std::size_t t = 0; t < options.trials; ++t) {
    const std::size_t n1 = 1 + rng() % 2, n2 = 1 + rng() % 2;
    const std::size_t s = 1 + rng() % 2, s2 = 1 + rng() % 2;
    const auto base = random_cross_merging_pair(s, n1, n2, kGrid4, rng);
    Matrix e1, e2;
    if (t % 2 == 0) {
      // Extra rows sharing the same merged pair.
      e1 = Matrix(s2, n1);
      e2 = Matrix(s2, n2);
      std::vector<double> z;
      for (double v : base.merged.first.canonical_matrix().data) z.push_back(v);
      for (double v : base.merged.second.canonical_matrix().data) z.push_back(-v);
      const Matrix full = rows_orthogonal_to(s2, z, rng);
      for (std::size_t r = 0; r < s2; ++r) {
        for (std::size_t c = 0; c < n1; ++c) e1(r, c) = full(r, c);
        for (std::size_t c = 0; c < n2; ++c) e2(r, c) = full(r, n1 + c);
      }
    } else {
      e1 = random_normal(s2, n1, rng);
      e2 = random_normal(s2, n2, rng);
    }
    const AggCoeffMatrix top1 = base.m1, top2 = base.m2;
    const AggCoeffMatrix st1(stack_rows(top1.entries(), e1)), st2(stack_rows(top2.entries(), e2));
    bool subset_ok = true, strict = false;
    std::optional<Witness> bad;
    for (const auto& x1 : universe) {
      if (x1.size() != n1) continue;
      for (const auto& x2 : universe) {
        if (x2.size() != n2) continue;
        const bool top = norm_diff(apply_agg(top1, x1), apply_agg(top2, x2)) < 1e-9;
        const bool stacked = norm_diff(apply_agg(st1, x1), apply_agg(st2, x2)) < 1e-9;
        if (stacked && !top) {
          subset_ok = false;
          bad = Witness{x1, x2};
        }
        if (top && !stacked) strict = true;
      }
    }
    const Matrix joint = concat_columns(top1.entries(), top2.entries());
    const Matrix joint_stacked = stack_rows(joint, concat_columns(e1, e2));
    record(subset, subset_ok, joint_stacked, bad);
    if (strict) {
      ++strict_cases;
      record(growth, numerical_rank(joint_stacked) > numerical_rank(joint), joint_stacked);
    }
  }
  finish_all(subset);
  finish_all(growth);
  growth.detail += " (" + std::to_string(strict_cases) + " cases with a strict subset on the grid)";
  return suite.take();
}

SuiteResult verify_prop3(const VerifyOptions& options) {
  SuiteBuilder suite("prop3");
  Rng rng(options.seed * 1000 + 4);
  std::vector<double> grid9;
  for (int i = -4; i <= 4; ++i) grid9.push_back(0.5 * i);
  SearchOptions cross;
  cross.exclude_zero = true;
  cross.distinct = false;

  PropertyResult& cert = suite.add("prop3_certificate_implies_disjoint");
  std::size_t certified = 0;
  for (std::size_t t = 0; t < scaled(options.trials, 50); ++t) {
    const std::size_t n1 = 1 + rng() % 2, n2 = 1 + rng() % 2;
    const std::size_t s = std::max<std::size_t>(1, n1 + n2 - 1 + rng() % 3);
    const AggCoeffMatrix m1(random_normal(s, n1, rng)), m2(random_normal(s, n2, rng));
    if (!ranges_disjoint_certificate(m1, m2)) continue;
    ++certified;
    const Matrix joint = concat_columns(m1.entries(), m2.entries());
    const bool trivial_kernel = null_space(joint).cols == 0;
    const auto w = collision_oracle(Aggregator::from_matrix(m1), Aggregator::from_matrix(m2), grid9, 2, cross);
    const bool injective = is_injective_for_size(m1) && is_injective_for_size(m2);
    record(cert, trivial_kernel && !w && injective, joint, w);
  }
  finish_all(cert);
  cert.detail += " (" + std::to_string(certified) + " certified pairs)";

  PropertyResult& deficient = suite.add("prop3_rank_deficient_cross_collision");
  for (std::size_t t = 0; t < scaled(options.trials, 10); ++t) {
    const std::size_t n1 = 1 + rng() % 2, n2 = 1 + rng() % 2;
    const std::size_t s = 1 + rng() % (n1 + n2);
    const auto pair = random_cross_merging_pair(s, n1, n2, kGrid4, rng);
    std::optional<Witness> w =
        collision_oracle(Aggregator::from_matrix(pair.m1), Aggregator::from_matrix(pair.m2), grid9, 2, cross);
    if (!w) w = cross_collision_from_kernel(pair.m1, pair.m2);
    const bool ok = !ranges_disjoint_certificate(pair.m1, pair.m2) && w && !w->first.is_zero() &&
                    !w->second.is_zero() &&
                    norm_diff(apply_agg(pair.m1, w->first), apply_agg(pair.m2, w->second)) < 1e-9;
    record(deficient, ok, concat_columns(pair.m1.entries(), pair.m2.entries()), w);
    if (t == 0 && ok) deficient.witness = w;
  }
  finish_all(deficient);

  {
    PropertyResult& p = suite.add("prop3_block_diagonal_example");
    const AggCoeffMatrix m1 = AggCoeffMatrix::from_rows({{1, 0}, {0, 1}, {0, 0}});
    const AggCoeffMatrix m2 = AggCoeffMatrix::from_rows({{0}, {0}, {1}});
    const auto w = collision_oracle(Aggregator::from_matrix(m1), Aggregator::from_matrix(m2), grid9, 2, cross);
    record(p, ranges_disjoint_certificate(m1, m2) && !w, {}, w);
    p.matrix = concat_columns(m1.entries(), m2.entries());
    finish_all(p);
  }
  {
    PropertyResult& p = suite.add("prop3_shared_identity_not_certified");
    const AggCoeffMatrix i2(Matrix::identity(2));
    const auto w = collision_oracle(Aggregator::from_matrix(i2), Aggregator::from_matrix(i2), grid9, 2, cross);
    record(p, !ranges_disjoint_certificate(i2, i2) && w.has_value(), {}, w);
    p.matrix = concat_columns(i2.entries(), i2.entries());
    p.witness = w;
    finish_all(p);
  }
  return suite.take();
}

SuiteResult verify_prop4(const VerifyOptions& options) {
  SuiteBuilder suite("prop4");
  Rng rng(options.seed * 1000 + 5);
  PropertyResult& eq = suite.add("prop4_gat_default_equals_expanding");
  PropertyResult& logits = suite.add("prop4_split_attention_logits");
  // One trial per graph; (K, d) cycles through {1, 2, 4} x {4, 8}.
  constexpr std::size_t kHeads[] = {1, 2, 4};
  constexpr std::size_t kDims[] = {4, 8};
  for (std::size_t t = 0; t < options.trials; ++t) {
    const std::size_t heads = kHeads[t % 3];
    const std::size_t d = kDims[(t / 3) % 2];
    LayerSpec spec;
    spec.kind = LayerKind::GatDefault;
    spec.d_in = d;
    spec.d_out = d;
    spec.heads = heads;
    Layer layer(spec, rng);
    const Graph g = random_graph(10, 0.3, d, rng);
    Tape t1, t2;
    const Matrix a = gat_default_forward(t1, layer, g, t1.constant(g.node_features())).value();
    const Matrix b = gat_expanding_forward(t2, layer, g, t2.constant(g.node_features())).value();
    const double dev = max_abs_diff(a, b);
    note_deviation(eq, dev);
    record(eq, dev < 1e-10);
    const double ldev =
        max_abs_diff(gat_concat_logits(layer, g, g.node_features()), gat_split_logits(layer, g, g.node_features()));
    note_deviation(logits, ldev);
    record(logits, ldev < 1e-10);
  }
  finish_all(eq);
  finish_all(logits);
  return suite.take();
}

SuiteResult verify_eq5(const VerifyOptions& options) {
  SuiteBuilder suite("eq5");
  Rng rng(options.seed * 1000 + 6);
  PropertyResult& eq = suite.add("eq5_three_stage_equals_expc");
  PropertyResult& active = suite.add("eq5_active_sets_match_relu_signs");
  PropertyResult& tape_route = suite.add("eq5_differentiable_three_stage_route");
  for (std::size_t t = 0; t < options.trials; ++t) {
    LayerSpec spec;
    spec.kind = LayerKind::ExpC;
    spec.d_in = 2 + rng() % 3;
    spec.d_out = 2 + rng() % 4;
    spec.s = 1 + rng() % 3;
    spec.mlp_depth = 1;
    Layer layer(spec, rng);
    const Graph g = random_graph(8, 0.4, spec.d_in, rng);
    const Matrix& h = g.node_features();
    Tape tape;
    const Matrix ref = expc_forward(tape, layer, g, tape.constant(h)).value();
    const ThreeStageResult res = expc_three_stage_forward(layer, g, h);
    const double dev = max_abs_diff(ref, res.output);
    note_deviation(eq, dev);
    record(eq, dev < 1e-10);

    // Sign pattern straight from the per-neighbor pre-activations.
    const Matrix& cw = layer.parameter("coef.W").value;
    const Matrix& cb = layer.parameter("coef.b").value;
    const Matrix& w = layer.parameter("mlp.0.W").value;
    const Matrix& b = layer.parameter("mlp.0.b").value;
    bool match = true;
    for (std::size_t v = 0; v < g.num_nodes(); ++v)
      for (std::size_t i = 0; i < spec.d_out; ++i) {
        std::vector<std::size_t> expected;
        for (std::size_t u : neighborhood(g, v)) {
          double z = b(i, 0);
          for (std::size_t q = 0; q < spec.s; ++q) {
            double m = cb(q, 0);
            for (std::size_t j = 0; j < spec.d_in; ++j) m += cw(q, j) * h(v, j) + cw(q, spec.d_in + j) * h(u, j);
            m = std::tanh(m);
            for (std::size_t j = 0; j < spec.d_in; ++j) z += w(i, j * spec.s + q) * m * h(u, j);
          }
          if (z > 0.0) expected.push_back(u);
        }
        match = match && res.nodes[v].active[i] == expected;
      }
    record(active, match);

    LayerSpec ts = spec;
    ts.kind = LayerKind::ExpCThreeStage;
    Layer staged(ts, rng);
    for (const Parameter& p : layer.parameters()) staged.parameter(p.name).value = p.value;
    Tape t2;
    const double tdev = max_abs_diff(staged.forward(t2, g, t2.constant(h)).value(), ref);
    note_deviation(tape_route, tdev);
    record(tape_route, tdev < 1e-10);
  }
  finish_all(eq);
  finish_all(active);
  finish_all(tape_route);
  return suite.take();
}

SuiteResult verify_appendix_g(const VerifyOptions& options) {
  SuiteBuilder suite("appendixG");
  Rng rng(options.seed * 1000 + 7);
  const Aggregator sum = Aggregator::sum();
  const Aggregator sum_mean = Aggregator::combine({sum, Aggregator::mean()});
  PropertyResult& one = suite.add("appendixG_one_row_stronger_than_sum");
  PropertyResult& two = suite.add("appendixG_one_and_invdeg_stronger_than_sum_mean");
  for (std::size_t t = 0; t < options.trials; ++t) {
    const std::size_t s = 1 + t % 2;
    const Matrix w = random_normal(s, 1, rng);
    const std::vector<double> b = random_normal(s, 1, rng).data;
    for (auto [append, weaker, prop] : {std::tuple{AppendRows::One, &sum, &one},
                                        std::tuple{AppendRows::OneAndInvDegree, &sum_mean, &two}}) {
      const Aggregator agg = Aggregator::expanding(w, b, append);
      const auto lost = separation_violation(agg, *weaker, kGrid012, 3);
      const auto gained = separation_violation(*weaker, agg, kGrid012, 3);
      record(*prop, !lost && gained.has_value(), w, lost ? lost : gained);
      if (t == 0) prop->witness = gained;
    }
  }
  finish_all(one);
  finish_all(two);
  return suite.take();
}

SuiteResult verify_layers(const VerifyOptions& options) {
  SuiteBuilder suite("layers");
  Rng rng(options.seed * 1000 + 8);
  PropertyResult& perm = suite.add("permutation_invariance_all_layers");
  PropertyResult& wl = suite.add("wl_ceiling_regular_pair");
  PropertyResult& grads = suite.add("gradients_all_layers");
  const auto [k33, prism] = gen_regular_pair();
  for (LayerKind kind : all_layer_kinds()) {
    for (std::size_t t = 0; t < options.trials; ++t) {
      Model model(make_model_spec(kind, 3, 4, 2, 2, true, 2, rng()));
      const Graph g = random_graph(2 + rng() % 9, 0.4, 3, rng);
      const auto p = random_permutation(g.num_nodes(), rng);
      const double dev = max_abs_diff(model.embed(g), model.embed(relabel(g, p)));
      note_deviation(perm, dev);
      record(perm, dev < 1e-10);
    }
    for (std::size_t t = 0; t < std::max<std::size_t>(1, options.trials / 4); ++t) {
      Model model(make_model_spec(kind, 1, 5, 3, 2, true, 2, rng()));
      const double dev = max_abs_diff(model.embed(k33), model.embed(prism));
      note_deviation(wl, dev);
      record(wl, dev < 1e-10 && count_triangles(k33) == 0 && count_triangles(prism) == 2);
    }
    for (std::size_t t = 0; t < scaled(options.trials, 5); ++t) {
      const auto re_sum = static_cast<bool>(t % 2) || kind == LayerKind::ExpCThreeStage;
      Model model(make_model_spec(kind, 2, 3, 2, 1 + t % 3, re_sum, 1 + t % 2, rng()));
      const Graph g = random_graph(3 + rng() % 5, 0.5, 2, rng);
      const double target = std::normal_distribution<double>(0.0, 1.0)(rng);
      auto loss = [&](Tape& tape) {
        Var out = model.forward(tape, g);
        return square(sub(out, tape.constant(Matrix(1, 1, target))));
      };
      const auto params = model.parameters();
      const GradCheckReport r = check_parameter_gradients(loss, params);
      note_deviation(grads, r.max_rel_error);
      record(grads, r.max_rel_error < 1e-4);
    }
  }
  finish_all(perm);
  finish_all(wl);
  finish_all(grads);
  return suite.take();
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"lemma1", "prop1", "prop2", "prop3", "prop4", "eq5", "appendixG",
                                                 "layers"};
  return names;
}

std::vector<SuiteResult> run_suite(const std::string& name, const VerifyOptions& options) {
  static const std::map<std::string, std::function<SuiteResult(const VerifyOptions&)>> table = {
      {"lemma1", verify_lemma1}, {"prop1", verify_prop1}, {"prop2", verify_prop2},
      {"prop3", verify_prop3},   {"prop4", verify_prop4}, {"eq5", verify_eq5},
      {"appendixG", verify_appendix_g}, {"layers", verify_layers}};
  if (name == "all") {
    std::vector<SuiteResult> out;
    for (const auto& n : suite_names()) out.push_back(table.at(n)(options));
    return out;
  }
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown suite '" + name + "'");
  return {it->second(options)};
}

}  // namespace agglab
