#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "agglab/aggregation.hpp"
#include "agglab/random.hpp"

namespace agglab {

/// Outcome of one checked property. `verdict` is true when the property holds.
struct PropertyResult {
  std::string property;
  bool verdict = false;
  /// Matrix the property was checked on (the failing one, if any).
  std::optional<Matrix> matrix;
  /// Illustrative or refuting multiset pair.
  std::optional<Witness> witness;
  std::size_t passed = 0;
  std::size_t trials = 0;
  /// Largest numerical deviation observed, where meaningful.
  std::optional<double> max_deviation;
  std::string detail;

  /// {"property":...,"matrix":[[...]]|null,"verdict":bool,"witness":{...}|null, ...}
  std::string to_json() const;
};

struct SuiteResult {
  std::string suite;
  std::vector<PropertyResult> properties;
  bool passed() const;
};

struct VerifyOptions {
  std::size_t trials = 20;
  std::uint64_t seed = 0;
};

/// lemma1, prop1, prop2, prop3, prop4, eq5, appendixG, layers.
const std::vector<std::string>& suite_names();
/// Runs one named suite, or every suite for "all". Throws
/// std::invalid_argument on an unknown name.
std::vector<SuiteResult> run_suite(const std::string& name, const VerifyOptions& options);

SuiteResult verify_lemma1(const VerifyOptions& options);
SuiteResult verify_prop1(const VerifyOptions& options);
SuiteResult verify_prop2(const VerifyOptions& options);
SuiteResult verify_prop3(const VerifyOptions& options);
SuiteResult verify_prop4(const VerifyOptions& options);
SuiteResult verify_eq5(const VerifyOptions& options);
SuiteResult verify_appendix_g(const VerifyOptions& options);
SuiteResult verify_layers(const VerifyOptions& options);

/// Sorted distinct size-n multisets a != b over `grid` and a coefficient
/// matrix (s x n) whose rows are orthogonal to a - b, so f_M(a) == f_M(b).
struct MergingMatrix {
  AggCoeffMatrix m;
  Witness merged;
};
MergingMatrix random_merging_matrix(std::size_t s, std::size_t n, std::span<const double> grid, Rng& rng);

/// [M1 M2] with kernel vector (a; -b) for nonzero grid multisets a (size n1)
/// and b (size n2), so f_M1(a) == f_M2(b).
struct CrossMergingPair {
  AggCoeffMatrix m1;
  AggCoeffMatrix m2;
  Witness merged;
};
CrossMergingPair random_cross_merging_pair(std::size_t s, std::size_t n1, std::size_t n2,
                                           std::span<const double> grid, Rng& rng);

}  // namespace agglab
