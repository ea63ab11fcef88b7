#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "agglab/verify.hpp"

using namespace agglab;
using nlohmann::json;

namespace {

const PropertyResult& find_property(const SuiteResult& s, const std::string& name) {
  for (const PropertyResult& p : s.properties)
    if (p.property == name) return p;
  throw std::runtime_error("missing property " + name);
}

}  // namespace

class SuiteTest : public ::testing::TestWithParam<std::string> {};

TEST_P(SuiteTest, EveryPropertyHolds) {
  const auto results = run_suite(GetParam(), {20, 0});
  ASSERT_EQ(results.size(), 1u);
  EXPECT_FALSE(results[0].properties.empty());
  for (const PropertyResult& p : results[0].properties) {
    EXPECT_TRUE(p.verdict) << p.to_json();
    EXPECT_EQ(p.passed, p.trials) << p.property;
  }
  EXPECT_TRUE(results[0].passed());
}

TEST_P(SuiteTest, DeterministicUnderSeed) {
  const auto a = run_suite(GetParam(), {4, 7});
  const auto b = run_suite(GetParam(), {4, 7});
  ASSERT_EQ(a[0].properties.size(), b[0].properties.size());
  for (std::size_t i = 0; i < a[0].properties.size(); ++i)
    EXPECT_EQ(a[0].properties[i].to_json(), b[0].properties[i].to_json());
}

INSTANTIATE_TEST_SUITE_P(AllSuites, SuiteTest, ::testing::ValuesIn(suite_names()));

TEST(Verify, AllRunsEverySuiteAndUnknownThrows) {
  EXPECT_EQ(run_suite("all", {2, 0}).size(), suite_names().size());
  EXPECT_THROW(run_suite("prop9", {}), std::invalid_argument);
}

TEST(Verify, GatEquivalenceCountsRequestedTrials) {
  const SuiteResult s = run_suite("prop4", {20, 0})[0];
  const PropertyResult& p = find_property(s, "prop4_gat_default_equals_expanding");
  EXPECT_EQ(p.trials, 20u);
  ASSERT_TRUE(p.max_deviation.has_value());
  EXPECT_LT(*p.max_deviation, 1e-10);
}

TEST(Verify, SumCollisionWitnessReported) {
  const SuiteResult s = run_suite("prop1", {20, 0})[0];
  const json j = json::parse(find_property(s, "prop1_iii_sum_collision").to_json());
  EXPECT_EQ(j.at("witness").at("first"), json::parse("[0.0,2.0]"));
  EXPECT_EQ(j.at("witness").at("second"), json::parse("[1.0,1.0]"));
}

TEST(Verify, JsonCarriesContractKeys) {
  PropertyResult p;
  p.property = "x";
  p.verdict = true;
  p.matrix = Matrix::from_rows({{1, 2}});
  const json j = json::parse(p.to_json());
  for (const char* key : {"property", "matrix", "verdict", "witness"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("matrix"), json::parse("[[1.0,2.0]]"));
  EXPECT_TRUE(j.at("witness").is_null());
}

TEST(Verify, MergingMatrixMerges) {
  Rng rng(1);
  const std::vector<double> grid = {-1, 0, 1, 2};
  for (int t = 0; t < 20; ++t) {
    const MergingMatrix mm = random_merging_matrix(1 + t % 2, 3, grid, rng);
    EXPECT_FALSE(mm.merged.first.same_multiset(mm.merged.second));
    const auto a = apply_agg(mm.m, mm.merged.first), b = apply_agg(mm.m, mm.merged.second);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(Verify, CrossMergingPairCollides) {
  Rng rng(2);
  const std::vector<double> grid = {-1, 0, 1, 2};
  for (int t = 0; t < 20; ++t) {
    const CrossMergingPair cp = random_cross_merging_pair(2, 2, 1, grid, rng);
    EXPECT_FALSE(ranges_disjoint_certificate(cp.m1, cp.m2));
    const auto a = apply_agg(cp.m1, cp.merged.first), b = apply_agg(cp.m2, cp.merged.second);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}
