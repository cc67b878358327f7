#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "poifusion/adamw.hpp"
#include "poifusion/ops.hpp"

using namespace poifusion;

namespace {

Tensor param(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v), true); }

template <class F>
double check_unary_grad(F f, Shape shape, unsigned seed, double lo = -2.0, double hi = 2.0) {
  Tensor x = param(shape, oracle::uniform_values(shape_numel(shape), seed, lo, hi));
  Tape probe;
  const std::vector<double> w = oracle::normal_values(f(probe, x).numel(), seed + 1);
  auto loss = [&] {
    Tape t;
    Tensor y = f(t, x);
    return ops::sum(t, ops::mul(t, y, Tensor(y.shape(), w)));
  };
  x.zero_grad();
  Tape tape;
  Tensor y = f(tape, x);
  Tensor l = ops::sum(tape, ops::mul(tape, y, Tensor(y.shape(), w)));
  tape.backward(l);
  const auto num = oracle::fd_gradient([&] { return loss().item(); }, x);
  return oracle::worst_rel(x.grad(), num);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor m(Shape{2, 2}, {1, 2, 3, 4});
  Tensor r = ops::matmul(t, eye, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tape t;
  Tensor r = ops::matmul(t, Tensor(Shape{1, 2}, {1, 2}), Tensor(Shape{2, 1}, {3, 4}));
  ASSERT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Tape t;
  EXPECT_THROW(ops::matmul(t, Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Tensor a = param({3, 4}, oracle::normal_values(12, 1));
  Tensor b(Shape{4, 2}, oracle::normal_values(8, 2));
  Tape tape;
  tape.backward(ops::sum(tape, ops::matmul(tape, a, b)));
  const auto num = oracle::fd_gradient(
      [&] {
        Tape t;
        return ops::sum(t, ops::matmul(t, a, b)).item();
      },
      a);
  EXPECT_LT(oracle::worst_rel(a.grad(), num), 1e-6);
}

TEST(Matmul, BatchedAndSharedRightOperandGradients) {
  Tensor b(Shape{4, 2}, oracle::normal_values(8, 3), true);
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::matmul(t, x, b); }, {2, 3, 4}, 4), 1e-6);
  Tensor bb(Shape{2, 4, 2}, oracle::normal_values(16, 5));
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::matmul(t, x, bb); }, {2, 3, 4}, 6), 1e-6);
  Tensor a(Shape{2, 3, 4}, oracle::normal_values(24, 7));
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::matmul(t, a, x); }, {4, 2}, 8), 1e-6);
}

TEST(Linear, GradientsForInputWeightAndBias) {
  Tensor w(Shape{3, 5}, oracle::normal_values(15, 9), true);
  Tensor b(Shape{5}, oracle::normal_values(5, 10), true);
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::linear(t, x, w, b); }, {4, 3}, 11), 1e-6);
  Tensor x(Shape{4, 3}, oracle::normal_values(12, 12));
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& p) { return ops::linear(t, x, p, b); }, {3, 5}, 13), 1e-6);
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& p) { return ops::linear(t, x, w, p); }, {5}, 14), 1e-6);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape t;
  Tensor y = ops::layer_norm(t, Tensor(Shape{4}, {1, 1, 1, 1}), Tensor(Shape{4}, {1, 1, 1, 1}),
                             Tensor(Shape{4}, {0, 0, 0, 0}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValuesMapToPlusMinusOne) {
  Tape t;
  Tensor y = ops::layer_norm(t, Tensor(Shape{2}, {0, 2}));
  // mean 1, variance 1: (x - 1)/sqrt(1 + eps).
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-15);
  EXPECT_NEAR(y[1], expect, 1e-15);
}

TEST(LayerNorm, SingleChannelIsRejected) {
  Tape t;
  EXPECT_THROW(ops::layer_norm(t, Tensor(Shape{3, 1})), DimensionError);
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  Tensor gamma(Shape{6}, oracle::uniform_values(6, 20, 0.5, 1.5), true);
  Tensor beta(Shape{6}, oracle::normal_values(6, 21), true);
  auto f = [&](Tape& t, const Tensor& x) { return ops::layer_norm(t, x, gamma, beta); };
  EXPECT_LT(check_unary_grad(f, {3, 6}, 22), 1e-5);
  Tensor x(Shape{3, 6}, oracle::normal_values(18, 23));
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& g) { return ops::layer_norm(t, x, g, beta); }, {6}, 24), 1e-5);
}

TEST(Softmax, UniformOnEqualLogits) {
  Tape t;
  Tensor y = ops::softmax(t, Tensor(Shape{3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogsOfIntegersGiveProportions) {
  Tape t;
  Tensor y = ops::softmax(t, Tensor(Shape{3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(y[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[2], 3.0 / 6.0, 1e-15);
}

TEST(Softmax, ShiftInvariantPositiveAndNormalized) {
  Tape t;
  const auto x = oracle::normal_values(7, 30, 3.0);
  std::vector<double> shifted = x;
  for (double& v : shifted) v += 100.0;
  Tensor a = ops::softmax(t, Tensor(Shape{7}, x));
  Tensor b = ops::softmax(t, Tensor(Shape{7}, shifted));
  double s = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_GT(a[i], 0.0);
    EXPECT_NEAR(a[i], b[i], 1e-15);
    s += a[i];
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  Tensor big = ops::softmax(t, Tensor(Shape{2}, {1e308, 0.0}));
  EXPECT_TRUE(big.all_finite());
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::softmax(t, x); }, {4, 5}, 31), 1e-6);
}

TEST(Elementwise, ReluValuesAndSubgradient) {
  Tensor x = param({3}, {-1, 0, 2});
  Tape t;
  Tensor y = ops::relu(t, x);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
  t.backward(ops::sum(t, y));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Elementwise, ConcatJoinsLastAxis) {
  Tape t;
  Tensor y = ops::concat(t, std::vector<Tensor>{Tensor(Shape{2}, {1, 2}), Tensor(Shape{1}, std::vector<double>{3.0})});
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Elementwise, IncompatibleShapesThrow) {
  Tape t;
  EXPECT_THROW(ops::add(t, Tensor(Shape{2}), Tensor(Shape{3})), DimensionError);
  EXPECT_THROW(ops::concat(t, std::vector<Tensor>{Tensor(Shape{2, 2}), Tensor(Shape{3, 1})}), DimensionError);
  EXPECT_NO_THROW(ops::mul(t, Tensor(Shape{2, 2}), Tensor::scalar(2.0)));
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Tensor other(Shape{3, 4}, oracle::normal_values(12, 40));
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::mul(t, x, other); }, {3, 4}, 41), 1e-6);
  EXPECT_LT(check_unary_grad([&](Tape& t, const Tensor& x) { return ops::sub(t, other, x); }, {3, 4}, 42), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::exp(t, x); }, {3, 4}, 43), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::sigmoid(t, x); }, {3, 4}, 44), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::softplus(t, x); }, {3, 4}, 45), 1e-6);
  // Keep away from the kink for abs and relu.
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::abs(t, x); }, {3, 4}, 46, 0.1, 2.0), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::relu(t, ops::add_scalar(t, x, -0.05)); },
                             {3, 4}, 47, 0.1, 2.0),
            1e-6);
  auto parts = [&](Tape& t, const Tensor& x) {
    return ops::concat(t, {ops::slice_last(t, x, 2, 4), ops::scale(t, x, 3.0), other});
  };
  EXPECT_LT(check_unary_grad(parts, {3, 4}, 48), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::gather_rows(t, x, {2, 0, 2}); }, {3, 4}, 49),
            1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::repeat_rows(t, x, 3); }, {3, 4}, 50), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::tile_middle(t, x, 2); }, {2, 3, 2}, 51),
            1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::swap_leading(t, x); }, {2, 3, 2}, 52), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::transpose(t, x); }, {3, 4}, 53), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::reshape(t, x, {4, 3}); }, {3, 4}, 54), 1e-6);
  EXPECT_LT(check_unary_grad([](Tape& t, const Tensor& x) { return ops::mean(t, x); }, {3, 4}, 55), 1e-6);
}

TEST(Tape, ValueUsedTwiceAccumulatesBothAdjoints) {
  Tensor x = param({}, {1.7});
  Tape t1;
  t1.backward(ops::mul(t1, x, x));
  const double square = x.grad()[0];
  Tensor a = param({}, {1.7}), b = param({}, {1.7});
  Tape t2;
  t2.backward(ops::mul(t2, a, b));
  EXPECT_EQ(square, a.grad()[0] + b.grad()[0]);
  EXPECT_DOUBLE_EQ(square, 2 * 1.7);
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    Tensor w(Shape{4, 3}, oracle::normal_values(12, 60), true);
    Tensor x(Shape{5, 4}, oracle::normal_values(20, 61));
    Tape t;
    Tensor y = ops::softmax(t, ops::layer_norm(t, ops::linear(t, x, w)));
    Tensor l = ops::sum(t, ops::mul(t, y, y));
    t.backward(l);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(l.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape t;
  Tensor x = param({2}, {1, 2});
  EXPECT_THROW(t.backward(ops::scale(t, x, 2.0)), DimensionError);
}

TEST(TensorInvariants, DataLengthMustMatchShapeAndRankIsCapped) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1}), DimensionError);
  Tensor g(Shape{2, 3}, true);
  EXPECT_EQ(g.grad().size(), 6u);
  EXPECT_TRUE(Tensor(Shape{2}).grad().empty());
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
  ParameterList ps{{"p", param({3}, {1, -2, 3})}};
  AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step(ps);
  EXPECT_EQ(std::vector<double>(ps[0].tensor.data().begin(), ps[0].tensor.data().end()),
            (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterList ps{{"p", param({}, {0.5})}};
  ps[0].tensor.grad()[0] = 1.0;
  AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step(ps);
  // m̂ = v̂ = 1, so the step is lr·1/(1 + eps).
  EXPECT_NEAR(ps[0].tensor[0], 0.5 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  ParameterList ps{{"p", param({}, {2.0})}};
  AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.01});
  opt.step(ps);
  EXPECT_NEAR(ps[0].tensor[0], 2.0 * (1.0 - 0.001), 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesTheParameter) {
  ParameterList ps{{"alpha", param({1}, {0})}, {"beta_block", param({2}, {0, 0})}};
  ps[1].tensor.grad()[1] = std::nan("");
  AdamW opt({});
  try {
    opt.step(ps);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta_block"), std::string::npos);
  }
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(AdamW, StepCounterIncreasesAndLrMustBePositive) {
  ParameterList ps{{"p", param({}, {1.0})}};
  AdamW opt({});
  for (int i = 1; i <= 3; ++i) {
    opt.step(ps);
    EXPECT_EQ(opt.step_count(), i);
  }
  EXPECT_THROW(AdamW({0.0}), std::invalid_argument);
}

TEST(OneCycle, WarmsUpToPeakThenDecays) {
  const long total = 100;
  EXPECT_NEAR(one_cycle_lr(0, total, 1e-3), 1e-3 / 25.0, 1e-18);
  double peak = 0.0;
  long at = 0;
  for (long s = 0; s < total; ++s)
    if (one_cycle_lr(s, total, 1e-3) > peak) peak = one_cycle_lr(s, total, 1e-3), at = s;
  EXPECT_NEAR(peak, 1e-3, 1e-6);  // the warm-up end falls between steps
  EXPECT_NEAR(static_cast<double>(at), 0.3 * 99, 1.0);
  EXPECT_NEAR(one_cycle_lr(total - 1, total, 1e-3), 1e-3 / 25.0 / 1e4, 1e-15);
}
