#include <gtest/gtest.h>

#include <cmath>

#include "agglab/aggregation.hpp"
#include "agglab/random.hpp"
#include "agglab/tensor.hpp"

using namespace agglab;

namespace {

Matrix shifted_away_from_zero(Matrix m, double margin = 0.05) {
  for (double& x : m.data)
    if (std::abs(x) < margin) x = x < 0 ? -margin : margin;
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
}

TEST(Matmul, RowOfOnesSums) {
  EXPECT_EQ(matmul(Matrix::from_rows({{1, 1}}), Matrix::column({1, 2})), Matrix::from_rows({{3}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("2x3"), std::string::npos) << what;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  const Matrix b = random_normal(4, 2, rng);
  const double err = finite_diff_check(
      [&](Tape& t, Var a) { return sum_all(matmul(a, t.constant(b))); }, random_normal(3, 4, rng));
  EXPECT_LT(err, 1e-6);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = random_normal(3, 4, rng), b = random_normal(4, 5, rng), c = random_normal(5, 2, rng);
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-10);
  }
}

TEST(Matmul, BackwardRulesAreGBtAndAtG) {
  Rng rng(3);
  const Matrix a = random_normal(3, 4, rng), b = random_normal(4, 2, rng), w = random_normal(3, 2, rng);
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  t.backward(sum_all(elementwise_mul(matmul(va, vb), t.constant(w))));
  EXPECT_LT(max_abs_diff(va.grad(), matmul(w, transpose(b))), 1e-14);
  EXPECT_LT(max_abs_diff(vb.grad(), matmul(transpose(a), w)), 1e-14);
}

TEST(Activation, ReluClampsNegativesAndZero) {
  Tape t;
  Var x = t.leaf(Matrix::column({-1, 0, 2}));
  EXPECT_EQ(relu(x).value(), Matrix::column({0, 0, 2}));
  t.backward(sum_all(relu(x)));
  EXPECT_EQ(x.grad(), Matrix::column({0, 0, 1}));  // subgradient 0 at the kink
}

TEST(Activation, TanhOfZeroIsZero) {
  Tape t;
  EXPECT_EQ(tanh(t.constant(Matrix::column({0.0}))).value(), Matrix::column({0.0}));
}

TEST(Activation, TanhGradientIsOneMinusSquare) {
  Rng rng(4);
  const Matrix x = random_normal(5, 1, rng);
  Tape t;
  Var v = t.leaf(x);
  t.backward(sum_all(tanh(v)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(v.grad().data[i], 1 - std::pow(std::tanh(x.data[i]), 2), 1e-15);
  EXPECT_LT(finite_diff_check([](Tape&, Var a) { return sum_all(tanh(a)); }, x), 1e-6);
}

TEST(Activation, LeakyReluDefaultSlope) {
  Tape t;
  EXPECT_EQ(leaky_relu(t.constant(Matrix::column({-1, 3}))).value(), Matrix::column({-0.2, 3}));
  EXPECT_EQ(activation(t.constant(Matrix::column({-1})), {ActivationKind::LeakyRelu, 0.5}).value(),
            Matrix::column({-0.5}));
}

TEST(Activation, SigmoidOfZeroIsHalf) {
  Tape t;
  EXPECT_DOUBLE_EQ(sigmoid(t.constant(Matrix::column({0.0}))).value().data[0], 0.5);
}

TEST(Softmax, SymmetricRowIsUniform) {
  Tape t;
  EXPECT_EQ(softmax_rows(t.constant(Matrix::from_rows({{0, 0}}))).value(), Matrix::from_rows({{0.5, 0.5}}));
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tape t;
  const Matrix y = softmax_rows(t.constant(Matrix::from_rows({{1000, 0}}))).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
  EXPECT_LT(y(0, 1), 1e-300);
  EXPECT_TRUE(std::isfinite(y(0, 1)));
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  for (double scale : {1.0, 100.0, 1000.0}) {
    Tape t;
    const Matrix y = softmax_rows(t.constant(random_uniform(4, 7, rng, -scale, scale))).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (double v : y.row(r)) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, SegmentSoftmaxNormalizesPerSegment) {
  Tape t;
  const std::vector<std::size_t> seg = {0, 0, 1, 1, 1};
  const Matrix y = segment_softmax(t.constant(Matrix::column({1, 2, 0, 0, 0})), seg, 2).value();
  EXPECT_NEAR(y.data[0] + y.data[1], 1.0, 1e-15);
  EXPECT_NEAR(y.data[2], 1.0 / 3, 1e-15);
}

TEST(VecStack, StacksColumns) {
  Tape t;
  EXPECT_EQ(vec_stack(t.constant(Matrix::from_rows({{1, 2}, {3, 4}}))).value(), Matrix::column({1, 3, 2, 4}));
  EXPECT_EQ(vec_stack(t.constant(Matrix::column({7, 8, 9}))).value(), Matrix::column({7, 8, 9}));
}

TEST(VecStack, UnvecRoundTripIsBitwise) {
  Rng rng(6);
  const Matrix x = random_normal(3, 5, rng);
  Tape t;
  EXPECT_EQ(unvec(vec_stack(t.constant(x)), 3, 5).value(), x);
}

TEST(Outer, BasicProducts) {
  Tape t;
  EXPECT_EQ(outer(t.constant(Matrix::column({1, 0})), t.constant(Matrix::column({5, 6}))).value(),
            Matrix::from_rows({{5, 6}, {0, 0}}));
  EXPECT_EQ(outer(t.constant(Matrix::column({0, 0})), t.constant(Matrix::column({5, 6}))).value(), Matrix(2, 2));
}

TEST(Outer, RandomOuterHasRankOne) {
  Rng rng(7);
  for (int i = 0; i < 10; ++i) {
    Tape t;
    const Matrix o = outer(t.constant(random_normal(4, 1, rng)), t.constant(random_normal(6, 1, rng))).value();
    EXPECT_EQ(numerical_rank(o), 1u);
  }
}

TEST(Outer, RowwiseOuterVecMatchesVecOfOuter) {
  Rng rng(8);
  const Matrix m = random_normal(3, 2, rng), h = random_normal(3, 4, rng);
  Tape t;
  const Matrix r = rowwise_outer_vec(t.constant(m), t.constant(h)).value();
  ASSERT_EQ(r.rows, 3u);
  ASSERT_EQ(r.cols, 8u);
  for (std::size_t e = 0; e < 3; ++e) {
    Tape t2;
    const Matrix mc = Matrix::column({m(e, 0), m(e, 1)});
    const Matrix hc = Matrix::column({h(e, 0), h(e, 1), h(e, 2), h(e, 3)});
    const Matrix v = vec_stack(outer(t2.constant(mc), t2.constant(hc))).value();
    for (std::size_t k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(r(e, k), v.data[k]);
  }
}

TEST(Combinators, ConcatMulSum) {
  Tape t;
  EXPECT_EQ(concat_cols({t.constant(Matrix::from_rows({{1}})), t.constant(Matrix::from_rows({{2, 3}}))}).value(),
            Matrix::from_rows({{1, 2, 3}}));
  EXPECT_EQ(concat_rows({t.constant(Matrix::column({1})), t.constant(Matrix::column({2, 3}))}).value(),
            Matrix::column({1, 2, 3}));
  EXPECT_EQ(elementwise_mul(t.constant(Matrix::column({1, 2})), t.constant(Matrix::column({3, 4}))).value(),
            Matrix::column({3, 8}));
  EXPECT_EQ(sum_rows(t.constant(Matrix(3, 2, 1.0))).value(), Matrix::from_rows({{3, 3}}));
  EXPECT_EQ(add_bias(t.constant(Matrix(2, 2)), t.constant(Matrix::column({1, 2}))).value(),
            Matrix::from_rows({{1, 2}, {1, 2}}));
}

TEST(Combinators, ShapeMismatchesThrow) {
  Tape t;
  EXPECT_THROW(add(t.constant(Matrix(2, 2)), t.constant(Matrix(2, 3))), DimensionError);
  EXPECT_THROW(elementwise_mul(t.constant(Matrix(1, 2)), t.constant(Matrix(2, 1))), DimensionError);
  EXPECT_THROW(concat_cols({t.constant(Matrix(1, 2)), t.constant(Matrix(2, 2))}), DimensionError);
  EXPECT_THROW(add_bias(t.constant(Matrix(2, 2)), t.constant(Matrix::column({1, 2, 3}))), DimensionError);
}

TEST(Backward, LinearLossGivesOuterWithOnes) {
  Rng rng(9);
  Parameter w("W", random_normal(3, 4, rng));
  const Matrix x = random_normal(4, 1, rng);
  Tape t;
  t.backward(sum_all(matmul(t.param(w), t.constant(x))));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(w.grad(i, j), x.data[j]);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tape t;
  Var x = t.leaf(Matrix(2, 1, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, RepeatedAfterZeroingIsIdentical) {
  Rng rng(10);
  Parameter w("W", random_normal(3, 3, rng));
  const Matrix x = random_normal(3, 2, rng);
  auto run = [&] {
    w.zero_grad();
    Tape t;
    t.backward(sum_all(tanh(matmul(t.param(w), t.constant(x)))));
    return w.grad;
  };
  const Matrix g1 = run();
  EXPECT_EQ(run(), g1);
}

TEST(Backward, ParameterGradientsAccumulate) {
  Parameter w("W", Matrix::from_rows({{2.0}}));
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(sum_all(square(t.param(w))));
  }
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 8.0);
}

TEST(FiniteDiff, QuadraticIsNearlyExact) {
  Rng rng(11);
  EXPECT_LT(finite_diff_check([](Tape&, Var a) { return sum_all(square(a)); }, random_normal(6, 1, rng)), 1e-9);
}

TEST(FiniteDiff, ReluAwayFromKink) {
  Rng rng(12);
  const Matrix theta = shifted_away_from_zero(random_normal(6, 1, rng));
  EXPECT_LT(finite_diff_check([](Tape&, Var a) { return sum_all(relu(a)); }, theta), 1e-9);
}

TEST(FiniteDiff, TwoLayerMlp) {
  Rng rng(13);
  const Matrix x = random_normal(5, 3, rng), w2 = random_normal(4, 2, rng);
  const double err = finite_diff_check(
      [&](Tape& t, Var w1) { return sum_all(tanh(matmul(relu(matmul(t.constant(x), w1)), t.constant(w2)))); },
      random_normal(3, 4, rng));
  EXPECT_LT(err, 1e-6);
}

// Every differentiable operation against central differences at non-kink points.
TEST(FiniteDiff, EveryOperation) {
  Rng rng(14);
  const std::vector<std::size_t> seg = {0, 0, 1, 2, 2};
  const std::vector<std::size_t> gather = {2, 0, 0, 1};
  const std::vector<double> factors = {0.5, -2.0, 3.0};
  const std::vector<long> source = {3, -1, 0, 5, 1, 1};
  const std::vector<std::function<Var(Tape&, Var)>> ops = {
      [](Tape&, Var a) { return sum_all(square(tanh(a))); },
      [](Tape&, Var a) { return sum_all(square(relu(a))); },
      [](Tape&, Var a) { return sum_all(square(leaky_relu(a))); },
      [](Tape&, Var a) { return sum_all(square(sigmoid(a))); },
      [](Tape&, Var a) { return sum_all(square(abs(a))); },
      [](Tape&, Var a) { return sum_all(square(softmax_rows(a))); },
      [&](Tape&, Var a) { return sum_all(square(segment_softmax(slice_cols(a, 0, 1), seg, 3))); },
      [](Tape&, Var a) { return sum_all(square(vec_stack(a))); },
      [](Tape&, Var a) { return sum_all(square(transpose(a))); },
      [](Tape&, Var a) { return sum_all(square(scale(a, -1.5))); },
      [](Tape&, Var a) { return sum_all(square(sub(a, tanh(a)))); },
      [](Tape&, Var a) { return sum_all(square(add(a, elementwise_mul(a, a)))); },
      [](Tape&, Var a) { return sum_all(square(sum_rows(a))); },
      [](Tape&, Var a) { return sum_all(square(mean_rows(a))); },
      [](Tape&, Var a) { return square(mean_all(a)); },
      [](Tape&, Var a) { return sum_all(square(rowwise_outer_vec(a, tanh(a)))); },
      [](Tape&, Var a) { return sum_all(square(outer(slice_cols(a, 0, 1), slice_cols(a, 1, 1)))); },
      [](Tape&, Var a) { return sum_all(square(concat_cols({a, tanh(a)}))); },
      [](Tape&, Var a) { return sum_all(square(concat_rows({a, slice_rows(a, 1, 2)}))); },
      [&](Tape&, Var a) { return sum_all(square(gather_rows(a, gather))); },
      [&](Tape&, Var a) { return sum_all(square(scatter_add_rows(a, seg, 3))); },
      [&](Tape&, Var a) { return sum_all(square(scale_rows(slice_rows(a, 0, 3), factors))); },
      [&](Tape&, Var a) { return sum_all(square(gather_elements(a, source, 2, 3))); },
      [](Tape&, Var a) { return sum_all(square(unvec(vec_stack(a), 2, 5))); },
      [](Tape& t, Var a) { return sum_all(square(add_bias(a, t.constant(Matrix::column({1, -1}))))); },
      [](Tape&, Var a) { return sum_all(square(matmul(a, transpose(a)))); },
  };
  for (int trial = 0; trial < 4; ++trial)
    for (std::size_t i = 0; i < ops.size(); ++i) {
      const Matrix theta = shifted_away_from_zero(random_normal(5, 2, rng));
      EXPECT_LT(finite_diff_check(ops[i], theta), 1e-6) << "operation " << i;
    }
}

TEST(FiniteDiff, ParameterCheckRestoresValues) {
  Rng rng(15);
  Parameter w("W", random_normal(2, 3, rng));
  const Matrix before = w.value;
  Parameter* ps[] = {&w};
  const GradCheckReport r = check_parameter_gradients(
      [&](Tape& t) { return sum_all(tanh(matmul(t.param(w), t.constant(Matrix(3, 1, 1.0))))); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.coordinates, 6u);
  EXPECT_EQ(w.value, before);
}

TEST(Tensor, NoNaNOnFiniteInputs) {
  Rng rng(16);
  Tape t;
  Var x = t.constant(random_uniform(4, 6, rng, -800, 800));
  for (Var y : {tanh(x), relu(x), sigmoid(x), softmax_rows(x), leaky_relu(x)})
    for (double v : y.value().data) EXPECT_FALSE(std::isnan(v));
}
