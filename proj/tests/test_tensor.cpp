#include <gtest/gtest.h>

#include <cctype>
#include <cstring>
#include <functional>
#include <map>
#include <memory>

#include "glstm/gradcheck.hpp"
#include "glstm/ops.hpp"
#include "op_cases.hpp"
#include "test_util.hpp"

using namespace glstm;
using glstm::test::off_kink_tensor;
using glstm::test::project;
using glstm::test::random_tensor;

namespace {

constexpr double kStep = 1e-5;
constexpr double kOpTol = 1e-5;
// Gradients below ~1e-5 are compared absolutely (error ~1e-10); see gradcheck.hpp.
constexpr double kFloor = 1e-5;

std::vector<double> vals(const Tensor& t) { return t.values(); }

}  // namespace

TEST(TensorBasics, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
}

TEST(TensorBasics, OuterAndConcatExamples) {
  EXPECT_EQ(vals(outer(Tensor::vector({1, 2}), Tensor::vector({3, 4}))), (std::vector<double>{3, 4, 6, 8}));
  EXPECT_EQ(vals(concat(Tensor::vector({1, 2}), Tensor::vector({0, 0}))), (std::vector<double>{1, 2, 0, 0}));
  EXPECT_DOUBLE_EQ(exp(Tensor::scalar(0)).item(), 1.0);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5);
}

TEST(TensorBasics, ShapeErrorNamesOpAndShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "add");
    EXPECT_EQ(e.lhs(), (Shape{2, 3}));
    EXPECT_EQ(e.rhs(), (Shape{3, 2}));
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Backprop, QuadraticGradient) {
  Tensor x = Tensor::vector({1, 2, 3}, true);
  const auto g = backpropagate(sum(mul(x, x)));
  EXPECT_EQ(vals(g.grad(x)), (std::vector<double>{2, 4, 6}));
}

TEST(Backprop, SigmoidAtSymmetricPoint) {
  Tensor w = Tensor::vector({0, 0}, true);
  Tensor x = Tensor::vector({0, 0}, true);
  const auto g = backpropagate(sigmoid(sum(mul(w, x))));
  EXPECT_EQ(vals(g.grad(w)), (std::vector<double>{0, 0}));
  EXPECT_EQ(vals(g.grad(x)), (std::vector<double>{0, 0}));
}

TEST(Backprop, RejectsNonScalarAndDetachedRoots) {
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backpropagate(scale(x, 2.0)), std::exception);
  EXPECT_THROW(backpropagate(sum(Tensor::vector({1, 2}))), std::exception);
}

TEST(Backprop, LeavesWithoutInfluenceGetZeros) {
  Tensor x = Tensor::vector({1, 2}, true);
  Tensor y = Tensor::vector({3, 4}, true);
  const auto g = backpropagate(sum(x));
  EXPECT_EQ(vals(g.grad(y)), (std::vector<double>{0, 0}));
  EXPECT_EQ(g.grad(y).shape(), y.shape());
}

TEST(Backprop, SeededPassesShareOneForward) {
  // y = [x0 * x1, x0 + x1]; each seed picks one row of the Jacobian.
  Tensor x = Tensor::vector({2, 5}, true);
  Tensor y = concat(reshape(mul(slice(x, 0, 1), slice(x, 1, 2)), {1}), reshape(sum(x), {1}));
  const std::vector<double> e0{1, 0}, e1{0, 1};
  EXPECT_EQ(vals(backpropagate_seeded(y, e0).grad(x)), (std::vector<double>{5, 2}));
  EXPECT_EQ(vals(backpropagate_seeded(y, e1).grad(x)), (std::vector<double>{1, 1}));
  EXPECT_EQ(vals(backpropagate_seeded(y, e0).grad(x)), (std::vector<double>{5, 2}));
}

TEST(Backprop, ReusedSubexpressionAccumulates) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  const auto g = backpropagate(add(y, mul(y, x)));  // x^2 + x^3
  EXPECT_NEAR(g.grad(x).item(), 2 * 3 + 3 * 9, 1e-12);
}

TEST(FiniteDifference, QuadraticIsExact) {
  const double err = finite_difference_check([](const Tensor& x) { return mul(x, x); }, Tensor::scalar(3.0), 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(FiniteDifference, ReportsNonFiniteCoordinate) {
  // log(x) at 1e-6 with step 1e-5 evaluates log of a negative number
  const Tensor x = Tensor::vector({1.0, 1e-6});
  try {
    finite_difference_check([](const Tensor& t) { return sum(log(t)); }, x, 1e-5);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.coordinate(), 1u);
  }
  EXPECT_THROW(finite_difference_check([](const Tensor& t) { return sum(t); }, x, 0.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Per-op gradient suite: every op against central differences, 100 random
// shapes/values per op.

namespace {

using glstm::test::CaseMaker;
using glstm::test::op_cases;
using glstm::test::OpCase;

class OpGradient : public ::testing::TestWithParam<std::string> {};

}  // namespace

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto cases = op_cases();
  const CaseMaker& make = cases.at(GetParam());
  std::uint64_t seed = 1469598103934665603ULL;
  for (char ch : GetParam()) seed = (seed ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
  Rng rng(seed);
  for (int trial = 0; trial < 100; ++trial) {
    OpCase c = make(rng, derive_seed(7, static_cast<std::uint64_t>(trial)));
    const auto rep = finite_difference_report(c.f, c.x, kStep, kFloor);
    ASSERT_LT(rep.max_rel_error, kOpTol) << GetParam() << " trial " << trial << " coord " << rep.worst_coordinate
                                         << " analytic " << rep.analytic << " numeric " << rep.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& [k, v] : op_cases()) names.push_back(k);
                           return names;
                         }()),
                         [](const ::testing::TestParamInfo<std::string>& info) {
                           std::string s = info.param;
                           for (char& ch : s)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return s;
                         });

TEST(OpGradient, RandomThreeLayerComposition) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(4), d = 1 + rng.below(4), h = 1 + rng.below(4);
    Tensor w1 = random_tensor(rng, {h, d}), w2 = random_tensor(rng, {h, h}), b = random_tensor(rng, {h});
    Tensor x = random_tensor(rng, {n, d});
    auto f = [=](const Tensor& t) {
      Tensor a = tanh(linear(t, w1, b));
      Tensor c = mul(sigmoid(matmul(a, w2)), gelu(a));
      return project(layer_norm(concat(c, exp(scale(a, 0.5)))), 3);
    };
    const auto rep = finite_difference_report(f, x, kStep, kFloor);
    EXPECT_LT(rep.max_rel_error, kOpTol) << "trial " << trial << " analytic " << rep.analytic << " numeric "
                                         << rep.numeric;
  }
}

// ---------------------------------------------------------------------------
// Conventions and oracles

TEST(MaxConst, TiesTakeZeroGradient) {
  Tensor x = Tensor::vector({-1.0, 0.0, 2.0}, true);
  const auto g = backpropagate(sum(max_const(x, 0.0)));
  EXPECT_EQ(vals(g.grad(x)), (std::vector<double>{0, 0, 1}));
}

TEST(SetMax, TiesGoToLowestIndexAndGradientOnlyToArgmax) {
  auto sp = std::make_shared<SparseMatrix>();
  sp->rows = 1;
  sp->cols = 3;
  sp->col = {0, 1, 2};
  sp->weight = {1, 1, 1};
  sp->row_ptr = {0, 3};
  Tensor v = Tensor::matrix(3, 1, {5.0, 5.0, 1.0}, true);
  Tensor y = set_max(v, sp);
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
  EXPECT_EQ(vals(backpropagate(sum(y)).grad(v)), (std::vector<double>{1, 0, 0}));

  // the extra candidate is visited first and wins ties
  Tensor ex = Tensor::matrix(1, 1, {5.0}, true);
  Tensor y2 = set_max(v, sp, ex);
  const auto g = backpropagate(sum(y2));
  EXPECT_EQ(vals(g.grad(v)), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(vals(g.grad(ex)), (std::vector<double>{1}));
}

TEST(EdgeOps, MatchNaiveLoops) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(5), p = 1 + rng.below(3), q = 1 + rng.below(3), count = rng.below(10);
    auto e = std::make_shared<EdgeList>();
    for (std::size_t i = 0; i < count; ++i) {
      e->src.push_back(rng.below(n));
      e->dst.push_back(rng.below(n));
    }
    Tensor w = random_tensor(rng, {count}), a = random_tensor(rng, {n, p}), b = random_tensor(rng, {n, q});
    const Tensor outer_sum = edge_outer_sum(w, a, b, e, n);
    const Tensor weighted = edge_weighted_sum(w, a, e, n);
    std::vector<double> want_o(n * p * q, 0.0), want_w(n * p, 0.0);
    for (std::size_t k = 0; k < count; ++k)
      for (std::size_t i = 0; i < p; ++i) {
        want_w[e->dst[k] * p + i] += w[k] * a.at(e->src[k], i);
        for (std::size_t j = 0; j < q; ++j)
          want_o[(e->dst[k] * p + i) * q + j] += w[k] * a.at(e->src[k], i) * b.at(e->src[k], j);
      }
    for (std::size_t i = 0; i < want_o.size(); ++i) EXPECT_NEAR(outer_sum[i], want_o[i], 1e-12);
    for (std::size_t i = 0; i < want_w.size(); ++i) EXPECT_NEAR(weighted[i], want_w[i], 1e-12);
  }
}

TEST(EdgeOps, RejectOutOfRangeEndpoints) {
  auto e = std::make_shared<EdgeList>();
  e->src = {0};
  e->dst = {3};
  EXPECT_THROW(edge_weighted_sum(Tensor::vector({1}), Tensor::zeros({2, 2}), e, 2), ShapeError);
  EXPECT_THROW(edge_weighted_sum(Tensor::vector({1, 2}), Tensor::zeros({2, 2}), e, 4), ShapeError);
}

TEST(GroupNorm, MatchesDirectComputation) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {3, 6}, -2, 2);
  const Tensor y = group_norm(x, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t g = 0; g < 2; ++g) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < 3; ++j) mu += x.at(i, g * 3 + j) / 3;
      for (std::size_t j = 0; j < 3; ++j) var += std::pow(x.at(i, g * 3 + j) - mu, 2) / 3;
      for (std::size_t j = 0; j < 3; ++j)
        EXPECT_NEAR(y.at(i, g * 3 + j), (x.at(i, g * 3 + j) - mu) / std::sqrt(var + 1e-5), 1e-12);
    }
  EXPECT_THROW(group_norm(x, 4), ShapeError);
}

TEST(Softmax, RowsSumToOneAndMatchLogSoftmax) {
  Rng rng(9);
  Tensor x = random_tensor(rng, {4, 5}, -30, 30);
  const Tensor p = softmax(x), lp = log_softmax(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      s += p.at(i, j);
      EXPECT_NEAR(std::log(p.at(i, j) + 1e-300), lp.at(i, j), 1e-9 + std::fabs(lp.at(i, j)) * 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Dropout, IdentityAtEvaluationAndInvertedScaling) {
  Rng rng(1);
  Tensor x = Tensor::filled({100, 50}, 1.0);
  EXPECT_EQ(dropout(x, 0.5, &rng, false).values(), x.values());
  const Tensor y = dropout(x, 0.25, &rng, true);
  std::size_t zeros = 0;
  for (double v : y.values()) {
    if (v == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  // binomial(5000, 0.25): mean 1250, sd ~30.6; 5 sd band
  EXPECT_NEAR(static_cast<double>(zeros), 1250.0, 5 * 30.62);
}

TEST(Dropout, MaskIsSeeded) {
  Tensor x = Tensor::filled({10, 10}, 2.0);
  Rng a(42), b(42);
  EXPECT_EQ(dropout(x, 0.3, &a, true).values(), dropout(x, 0.3, &b, true).values());
}

TEST(Determinism, SameSeedGivesBitwiseIdenticalValuesAndGradients) {
  auto run = [] {
    Rng rng(123);
    Tensor w = random_tensor(rng, {4, 3});
    w.set_requires_grad(true);
    Tensor x = random_tensor(rng, {5, 3});
    Tensor y = dropout(gelu(linear(x, w)), 0.2, &rng, true);
    Tensor loss = sum(square(y));
    return std::pair{loss.item(), backpropagate(loss).grad(w).values()};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(std::memcmp(&a.first, &b.first, sizeof(double)), 0);
  ASSERT_EQ(a.second.size(), b.second.size());
  EXPECT_EQ(std::memcmp(a.second.data(), b.second.data(), a.second.size() * sizeof(double)), 0);
}

TEST(Rng, UniformIntegersPassChiSquare) {
  Rng rng(2024);
  constexpr std::size_t kBins = 10, kDraws = 100000;
  std::vector<double> counts(kBins, 0);
  for (std::size_t i = 0; i < kDraws; ++i) counts[rng.below(kBins)] += 1;
  double chi2 = 0;
  for (double c : counts) chi2 += std::pow(c - kDraws / kBins, 2) / (kDraws / kBins);
  EXPECT_LT(chi2, 27.88);  // chi-square(9) 0.999 quantile
}

TEST(Rng, NormalMoments) {
  Rng rng(7);
  double s = 0, ss = 0;
  constexpr int kN = 200000;
  for (int i = 0; i < kN; ++i) {
    const double z = rng.normal();
    s += z;
    ss += z * z;
  }
  EXPECT_NEAR(s / kN, 0.0, 0.01);
  EXPECT_NEAR(ss / kN, 1.0, 0.01);
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  EXPECT_EQ(derive_seed(5, 9), derive_seed(5, 9));
}
