#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "sbfm/gradcheck.hpp"
#include "sbfm/kernels.hpp"
#include "sbfm/ops.hpp"
#include "sbfm/optim.hpp"
#include "sbfm/sbfm.hpp"
#include "sbfm/tape.hpp"

using namespace sbfm;
using sbfm::testing::random_tensor;

namespace {

Tensor grid3x3() { return Tensor(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}); }

}  // namespace

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Tape tape;
  Rng rng(1);
  auto y = conv2d(tape.constant(Tensor(Shape{1, 1, 3, 3})),
                  tape.constant(random_tensor({2, 1, 2, 2}, rng)));
  for (double v : y.value().values) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, IdentityKernel) {
  Tape tape;
  auto y = conv2d(tape.constant(grid3x3()), tape.constant(Tensor(Shape{1, 1, 1, 1}, {1.0})));
  EXPECT_EQ(y.value().values, grid3x3().values);
}

TEST(Conv2d, DiagonalKernelHandValues) {
  Tape tape;
  auto y = conv2d(tape.constant(grid3x3()), tape.constant(Tensor(Shape{1, 1, 2, 2}, {1, 0, 0, 1})));
  EXPECT_EQ(y.value().shape, (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.value().values, (std::vector<double>{6, 8, 12, 14}));
}

TEST(Conv2d, ChannelMismatchThrows) {
  Tape tape;
  EXPECT_THROW(conv2d(tape.constant(Tensor(Shape{1, 2, 4, 4})),
                      tape.constant(Tensor(Shape{1, 3, 3, 3}))),
               DimensionError);
  EXPECT_THROW(conv2d(tape.constant(Tensor(Shape{1, 1, 2, 2})),
                      tape.constant(Tensor(Shape{1, 1, 3, 3}))),
               DimensionError);
}

TEST(Conv2d, MatchesOracleBitwise) {
  Rng rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t B = 1 + rng.below(2), C = 1 + rng.below(3), H = 3 + rng.below(6),
                      W = 3 + rng.below(6), F = 1 + rng.below(4), K = 1 + rng.below(3),
                      stride = 1 + rng.below(2), pad = rng.below(2);
    Tensor x = random_tensor({B, C, H, W}, rng);
    Tensor w = random_tensor({F, C, K, K}, rng);
    Tape tape;
    auto y = conv2d(tape.constant(x), tape.constant(w), stride, pad);
    EXPECT_TRUE(bitwise_equal(y.value(), sbfm::testing::conv2d_oracle(x, w, stride, pad)))
        << "trial " << trial;
  }
}

TEST(Conv2d, ThreadCountDoesNotChangeResults) {
  Rng rng(3);
  Tensor x = random_tensor({5, 3, 9, 9}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&](std::size_t threads) {
    kernels::set_num_threads(threads);
    Tape tape;
    Tensor xs = x, ws = w;
    xs.requires_grad = ws.requires_grad = true;
    auto y = conv2d(tape.parameter(xs), tape.parameter(ws), 1, 1);
    tape.backward(sum(relu(y)));
    return std::vector<Tensor>{y.value(), Tensor(xs.shape, xs.grad), Tensor(ws.shape, ws.grad)};
  };
  const auto one = run(1);
  const auto four = run(4);
  kernels::set_num_threads(1);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_TRUE(bitwise_equal(one[i], four[i]));
}

TEST(MaxPool, ConstantInputGivesConstantOutput) {
  Tape tape;
  auto y = maxpool2d(tape.constant(Tensor(Shape{1, 2, 4, 4}, 3.5)), 2, 2);
  for (double v : y.value().values) EXPECT_EQ(v, 3.5);
}

TEST(MaxPool, SingleWindow) {
  Tape tape;
  auto y = maxpool2d(tape.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
  EXPECT_EQ(y.value().values, std::vector<double>{4});
}

TEST(MaxPool, RampQuadrantsMatchOracle) {
  Tensor ramp(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) ramp.values[i] = static_cast<double>(i);
  Tape tape;
  auto y = maxpool2d(tape.constant(ramp), 2, 2);
  EXPECT_EQ(y.value().values, sbfm::testing::maxpool_oracle(ramp, 2, 2).values);
  EXPECT_EQ(y.value().values, (std::vector<double>{5, 7, 13, 15}));
}

TEST(MaxPool, TieRoutesGradientToFirstInScanOrder) {
  Tensor x(Shape{1, 1, 2, 2}, 1.0);
  x.requires_grad = true;
  Tape tape;
  tape.backward(sum(maxpool2d(tape.parameter(x), 2, 2)));
  EXPECT_EQ(x.grad, (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, WindowLargerThanInputThrows) {
  Tape tape;
  EXPECT_THROW(maxpool2d(tape.constant(Tensor(Shape{1, 1, 2, 2})), 3, 1), DimensionError);
}

TEST(Elementwise, ReluLinearConcat) {
  Tape tape;
  auto r = relu(tape.constant(Tensor(Shape{3}, {-1, 0, 2})));
  EXPECT_EQ(r.value().values, (std::vector<double>{0, 0, 2}));

  Tensor x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = linear(tape.constant(x), tape.constant(eye), tape.constant(Tensor(Shape{3})));
  EXPECT_EQ(y.value().values, x.values);

  auto c = concat(tape.constant(Tensor(Shape{1, 2}, {1, 2})), tape.constant(Tensor(Shape{1, 1}, {3})));
  EXPECT_EQ(c.value().values, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(c.value().shape, (Shape{1, 3}));

  EXPECT_THROW(linear(tape.constant(x), tape.constant(Tensor(Shape{2, 3})),
                      tape.constant(Tensor(Shape{3}))),
               DimensionError);
  EXPECT_THROW(concat(tape.constant(Tensor(Shape{1, 2})), tape.constant(Tensor(Shape{2, 2}))),
               DimensionError);
}

TEST(ReplicatePad, RepeatsBorderPixels) {
  Tape tape;
  const auto y = replicate_pad(tape.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), 1).value();
  EXPECT_EQ(y.shape, (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.values, (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(ReplicatePad, CornerCollectsItsCopies) {
  Tape tape;
  Var x = tape.variable(Tensor(Shape{1, 1, 2, 2}, 0.0));
  tape.backward(sum(replicate_pad(x, 1)));
  const auto g = tape.grad(x);
  EXPECT_EQ(std::vector<double>(g.begin(), g.end()), (std::vector<double>{4, 4, 4, 4}));
}

TEST(Flatten, CollapsesTrailingAxes) {
  Tape tape;
  auto f = flatten(tape.constant(Tensor(Shape{2, 3, 2, 2})));
  EXPECT_EQ(f.value().shape, (Shape{2, 12}));
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Tape tape;
  auto loss = softmax_cross_entropy(tape.constant(Tensor(Shape{2, 10}, 0.3)), std::vector<int>{3, 7});
  EXPECT_NEAR(loss.value()[0], 2.302585092994046, 1e-12);
}

TEST(SoftmaxCrossEntropy, HugeMarginGoesToZero) {
  Tensor z(Shape{1, 3}, {0, 0, 1e5});
  Tape tape;
  auto loss = softmax_cross_entropy(tape.constant(z), std::vector<int>{2});
  EXPECT_NEAR(loss.value()[0], 0.0, 1e-12);
  EXPECT_TRUE(loss.value().all_finite());
}

TEST(SoftmaxCrossEntropy, HandValue) {
  Tape tape;
  auto loss = softmax_cross_entropy(tape.constant(Tensor(Shape{1, 3}, {1, 2, 3})), std::vector<int>{2});
  EXPECT_NEAR(loss.value()[0], 0.4076059644443804, 1e-12);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeThrows) {
  Tape tape;
  auto z = tape.constant(Tensor(Shape{1, 3}));
  EXPECT_THROW(softmax_cross_entropy(z, std::vector<int>{3}), IndexError);
  EXPECT_THROW(softmax_cross_entropy(z, std::vector<int>{-1}), IndexError);
}

TEST(Backward, SumSeedsOnes) {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{3}, {4, 5, 6}));
  tape.backward(sum(x));
  EXPECT_EQ(std::vector<double>(tape.grad(x).begin(), tape.grad(x).end()),
            (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwoX) {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{2}, {1, 2}));
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(tape.grad(x).begin(), tape.grad(x).end()),
            (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{2}, {1, 2}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor k = random_tensor({2, 1, 3, 3}, rng);
  Tensor w = random_tensor({8, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  auto f = [&](Var x) {
    Tape& t = x.tape();
    auto h = relu(conv2d(x, t.constant(k), 1, 1));
    h = maxpool2d(h, 2, 2);
    auto logits = linear(flatten(h), t.constant(w), t.constant(b));
    return softmax_cross_entropy(logits, std::vector<int>{1});
  };
  const auto report = grad_check(f, random_tensor({1, 1, 4, 4}, rng));
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Sgd, PlainStep) {
  Tensor p(Shape{1}, {1.0});
  p.grad = {1.0};
  SgdState state;
  std::vector<Tensor*> params{&p};
  sgd_step(params, OptimizerConfig{0.1, 0.0, 0.0}, state);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_EQ(p.grad, std::vector<double>{0.0});
}

TEST(Sgd, ZeroGradLeavesParameter) {
  Tensor p(Shape{2}, {0.25, -3.0});
  p.zero_grad();
  SgdState state;
  std::vector<Tensor*> params{&p};
  sgd_step(params, OptimizerConfig{0.1, 0.9, 0.0}, state);
  EXPECT_EQ(p.values, (std::vector<double>{0.25, -3.0}));
}

TEST(Sgd, MomentumTwoSteps) {
  Tensor p(Shape{1}, {0.0});
  SgdState state;
  std::vector<Tensor*> params{&p};
  const OptimizerConfig cfg{0.1, 0.9, 0.0};
  p.grad = {1.0};
  sgd_step(params, cfg, state);
  EXPECT_NEAR(p[0], -0.1, 1e-15);
  p.grad = {1.0};
  sgd_step(params, cfg, state);
  EXPECT_NEAR(p[0], -0.29, 1e-15);
}

TEST(Sgd, MissingGradThrows) {
  Tensor p(Shape{1}, {0.0});
  SgdState state;
  std::vector<Tensor*> params{&p};
  EXPECT_THROW(sgd_step(params, OptimizerConfig{}, state), ContractError);
  EXPECT_THROW(OptimizerConfig({0.0, 0.9, 0.0}).validate(), ConfigError);
}

TEST(GradCheck, SumIsExact) {
  Rng rng(5);
  const auto report = grad_check([](Var x) { return sum(x); }, random_tensor({4, 3}, rng));
  EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(GradCheck, ConvReluSum) {
  Rng rng(9);
  Tensor k = random_tensor({1, 1, 3, 3}, rng);
  const auto report = grad_check(
      [&](Var x) { return sum(relu(conv2d(x, x.tape().constant(k), 1, 0))); },
      random_tensor({1, 1, 5, 5}, rng));
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(GradCheck, HardThresholdIsFlagged) {
  Tensor x(Shape{1, 1, 2, 2}, {0.2, 0.9, 0.5, 0.1});
  // Finite differences of a step function are 0 almost everywhere; the
  // straight-through gradient is 1, so every coordinate mismatches.
  const auto report = grad_check([](Var v) { return sum(threshold(v, 0.5)); }, x);
  EXPECT_FALSE(report.passed);
  EXPECT_EQ(report.mismatches, 4u);
}

namespace {

using OpFn = std::function<Var(Var)>;

void expect_gradients_match(const OpFn& f, const Shape& shape, int trials, std::uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < trials; ++i) {
    const auto report = grad_check(f, random_tensor(shape, rng));
    ASSERT_LT(report.max_rel_error, 1e-4) << "trial " << i << " index " << report.worst_index;
  }
}

}  // namespace

TEST(GradientProperty, EveryDifferentiableOp) {
  Rng rng(21);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor w = random_tensor({12, 4}, rng);
  const Tensor bias = random_tensor({4}, rng);
  const Tensor other = random_tensor({2, 6}, rng);
  const std::vector<double> mean{0.1, -0.2}, sd{0.5, 2.0};
  const std::vector<int> labels{1, 3};

  expect_gradients_match([&](Var x) { return sum(conv2d(x, x.tape().constant(k), 1, 1)); },
                         {2, 2, 5, 5}, 20, 1);
  const Tensor conv_in = random_tensor({2, 2, 5, 5}, rng);
  expect_gradients_match(
      [&](Var kv) {
        Var y = conv2d(kv.tape().constant(conv_in), kv, 2, 1);
        return sum(mul(y, y));
      },
      {3, 2, 3, 3}, 5, 2);
  expect_gradients_match([](Var x) { return sum(mul(maxpool2d(x, 2, 2), maxpool2d(x, 2, 2))); },
                         {2, 2, 4, 6}, 20, 3);
  expect_gradients_match([](Var x) { return sum(mul(relu(x), x)); }, {3, 5}, 20, 4);
  expect_gradients_match([](Var x) { return sum(mul(absolute(x), x)); }, {3, 5}, 20, 5);
  expect_gradients_match(
      [&](Var x) {
        Tape& t = x.tape();
        return softmax_cross_entropy(linear(x, t.constant(w), t.constant(bias)), labels);
      },
      {2, 12}, 20, 6);
  expect_gradients_match(
      [&](Var wv) {
        Tape& t = wv.tape();
        Rng r(8);
        return softmax_cross_entropy(linear(t.constant(random_tensor({2, 12}, r)), wv,
                                            t.constant(bias)),
                                     labels);
      },
      {12, 4}, 10, 7);
  expect_gradients_match(
      [&](Var x) {
        Var c = concat(x, x.tape().constant(other));
        return sum(mul(c, c));
      },
      {2, 3}, 20, 8);
  expect_gradients_match([](Var x) { return sum(mul(flatten(x), flatten(x))); }, {2, 2, 3}, 20, 9);
  expect_gradients_match(
      [&](Var x) {
        Var s = standardize(x, mean, sd);
        return sum(mul(s, s));
      },
      {2, 2, 3, 3}, 20, 10);
  expect_gradients_match(
      [&](Var b) {
        Var y = add_channel_bias(b.tape().constant(Tensor(Shape{2, 4, 2, 2}, 0.3)), b);
        return sum(mul(y, y));
      },
      {4}, 20, 11);
  expect_gradients_match([&](Var x) { return softmax_cross_entropy(x, labels); }, {2, 5}, 20, 12);
  const Tensor pad_mix = random_tensor({2, 2, 7, 8}, rng);
  expect_gradients_match(
      [&](Var x) { return sum(mul(replicate_pad(x, 2), x.tape().constant(pad_mix))); },
      {2, 2, 3, 4}, 20, 13);
}

TEST(Determinism, RepeatedForwardBackwardIsBitwiseStable) {
  auto run = [] {
    Rng rng(42);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    k.requires_grad = true;
    Tape tape;
    auto y = maxpool2d(relu(conv2d(tape.constant(x), tape.parameter(k), 1, 1)), 2, 2);
    auto loss = softmax_cross_entropy(
        linear(flatten(y), tape.constant(random_tensor({64, 3}, rng)),
               tape.constant(Tensor(Shape{3}))),
        std::vector<int>{0, 2});
    tape.backward(loss);
    return std::pair{loss.value()[0], k.grad};
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(a.first), std::bit_cast<std::uint64_t>(b.first));
  EXPECT_EQ(a.second, b.second);
}

TEST(Finiteness, LargeInputsStayFinite) {
  Rng rng(13);
  Tensor x = random_tensor({2, 1, 6, 6}, rng, -1e6, 1e6);
  x.requires_grad = true;
  Tape tape;
  auto h = maxpool2d(relu(conv2d(tape.parameter(x), tape.constant(random_tensor({2, 1, 3, 3}, rng)), 1, 1)), 2, 2);
  auto logits = linear(flatten(h), tape.constant(random_tensor({18, 4}, rng)),
                       tape.constant(Tensor(Shape{4})));
  auto loss = softmax_cross_entropy(logits, std::vector<int>{0, 3});
  tape.backward(loss);
  EXPECT_TRUE(loss.value().all_finite());
  EXPECT_TRUE(Tensor(x.shape, x.grad).all_finite());
}
