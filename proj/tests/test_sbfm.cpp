#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "oracles.hpp"
#include "sbfm/data.hpp"
#include "sbfm/gradcheck.hpp"
#include "sbfm/model.hpp"
#include "sbfm/optim.hpp"
#include "sbfm/sbfm.hpp"
#include "sbfm/tape.hpp"
#include "sbfm/train.hpp"

using namespace sbfm;
using sbfm::testing::conv2d_oracle;
using sbfm::testing::random_tensor;

namespace {

// Expected sign layouts written out by hand, row-major, P/0/N.
const char* kLayouts[4] = {"PPP000NNN", "P0NP0NP0N", "PP0P0N0NN", "0PPN0PNN0"};

CellSign sign_of_char(char c) {
  return c == 'P' ? CellSign::Positive : (c == 'N' ? CellSign::Negative : CellSign::Zero);
}

DirectionalKernel classic_kernel(Direction d, std::size_t channels = 1) {
  return init_directional_kernel(DirectionPattern::make(d), 1, channels, 0, 0.0);
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

std::size_t ones(const Tensor& t) {
  return static_cast<std::size_t>(std::count(t.values.begin(), t.values.end(), 1.0));
}

}  // namespace

TEST(DirectionPattern, LayoutsMatchHandTables) {
  for (std::size_t d = 0; d < 4; ++d) {
    const auto p = DirectionPattern::make(kDirections[d]);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(p.cells[i], sign_of_char(kLayouts[d][i])) << d << " " << i;
  }
}

TEST(DirectionPattern, MasksPartitionTheGrid) {
  for (auto d : kDirections) {
    const auto p = DirectionPattern::make(d);
    const auto pos = p.pos_mask(), zero = p.zero_mask(), neg = p.neg_mask();
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(pos[i] + zero[i] + neg[i], 1);
    EXPECT_EQ(std::count(zero.begin(), zero.end(), true), 3);
  }
}

TEST(DirectionPattern, OnlyThreeByThree) {
  EXPECT_THROW(DirectionPattern::make(Direction::Horizontal, 5), ConfigError);
}

TEST(ClassicSobel, SignsAgreeWithPatternAndBalance) {
  for (auto d : kDirections) {
    const auto p = DirectionPattern::make(d);
    const auto w = classic_sobel(d);
    double sum = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_DOUBLE_EQ(clamp_to_cell(w[i], p.cells[i]), w[i]);
      sum += w[i];
    }
    EXPECT_EQ(sum, 0.0);
  }
}

TEST(ProjectKernel, ClampArithmeticOnHorizontal) {
  DirectionalKernel k{DirectionPattern::make(Direction::Horizontal), Tensor(Shape{1, 1, 3, 3})};
  k.weights.values = {1.7, -0.2, 0.3, 0.25, -3.0, 0.0, -0.5, -1.4, 0.4};
  const auto p = project_kernel(k);
  const std::vector<double> expected{1.0, 0.0, 0.3, 0.0, 0.0, 0.0, -0.5, -1.0, 0.0};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(p.weights.values[i], expected[i]) << i;
  EXPECT_TRUE(p.feasible());
}

TEST(ProjectKernel, ZeroCellsBecomePositiveZero) {
  DirectionalKernel k{DirectionPattern::make(Direction::Vertical), Tensor(Shape{1, 1, 3, 3}, -0.0)};
  EXPECT_FALSE(k.feasible());
  const auto p = project_kernel(k);
  for (double w : p.weights.values) EXPECT_FALSE(std::signbit(w));
  EXPECT_TRUE(p.feasible());
}

TEST(ProjectKernel, FeasibleAndZeroKernelsUnchanged) {
  for (auto d : kDirections) {
    const auto k = classic_kernel(d, 2);
    const auto p = project_kernel(k);
    EXPECT_TRUE(bitwise_equal(p.weights, k.weights));
    DirectionalKernel z{DirectionPattern::make(d), Tensor(Shape{2, 3, 3, 3})};
    EXPECT_TRUE(bitwise_equal(project_kernel(z).weights, z.weights));
  }
}

TEST(ProjectKernel, IdempotentOnRandomKernels) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    DirectionalKernel k{DirectionPattern::make(kDirections[trial % 4]),
                        random_tensor({3, 2, 3, 3}, rng, -5.0, 5.0)};
    const auto once = project_kernel(k);
    const auto twice = project_kernel(once);
    EXPECT_TRUE(once.feasible());
    for (std::size_t i = 0; i < once.weights.size(); ++i)
      ASSERT_TRUE(same_bits(once.weights.values[i], twice.weights.values[i]));
  }
}

TEST(InitDirectionalKernel, DeterministicFeasibleFixedPoint) {
  for (auto d : kDirections) {
    const auto p = DirectionPattern::make(d);
    const auto a = init_directional_kernel(p, 4, 3, 42);
    const auto b = init_directional_kernel(p, 4, 3, 42);
    EXPECT_TRUE(bitwise_equal(a.weights, b.weights));
    EXPECT_TRUE(a.feasible());
    EXPECT_TRUE(bitwise_equal(project_kernel(a).weights, a.weights));
    const auto base = classic_sobel(d);
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
      const std::size_t cell = i % 9;
      if (p.cells[cell] == CellSign::Zero) {
        EXPECT_TRUE(same_bits(a.weights.values[i], 0.0));
      } else {
        EXPECT_LE(std::abs(a.weights.values[i] - base[cell]), 0.05 + 1e-15);
      }
    }
  }
}

TEST(InitDirectionalKernel, NoiseOffGivesClassicCoefficients) {
  const auto k = classic_kernel(Direction::PositiveDiagonal, 2);
  const auto base = classic_sobel(Direction::PositiveDiagonal);
  for (std::size_t i = 0; i < k.weights.size(); ++i) EXPECT_EQ(k.weights.values[i], base[i % 9]);
}

TEST(InitDirectionalKernel, RejectsEmptyShape) {
  EXPECT_THROW(init_directional_kernel(DirectionPattern::make(Direction::Vertical), 0, 1, 1), ConfigError);
}

TEST(SobelLayer, ZeroImageGivesZero) {
  SbfmConfig cfg;
  cfg.layers = 1;
  const auto s = build_sbfm(cfg, 3, 3);
  Tape tape;
  const auto y = sobel_layer_forward(s.layers[0], tape.constant(Tensor(Shape{2, 3, 8, 8})));
  for (double v : y.value().values) EXPECT_EQ(v, 0.0);
}

TEST(SobelLayer, ConstantImageCancels) {
  SobelLayer layer;
  for (std::size_t d = 0; d < 4; ++d) layer.kernels[d] = classic_kernel(kDirections[d]);
  layer.pool = {0, 0};
  Tape tape;
  // 0.5 keeps every product exact, so the cancellation is exact too.
  const auto exact = sobel_layer_forward(layer, tape.constant(Tensor(Shape{1, 1, 8, 8}, 0.5))).value();
  for (double v : exact.values) EXPECT_EQ(v, 0.0);
  const auto y = sobel_layer_forward(layer, tape.constant(Tensor(Shape{1, 1, 8, 8}, 0.7))).value();
  for (double v : y.values) EXPECT_LE(std::abs(v), 1e-15);
}

TEST(SobelLayer, HorizontalStepImage) {
  // Top half 1, bottom half 0, padded by hand with copies of the border.
  Tensor img(Shape{1, 1, 8, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) img.at(0, 0, i, j) = 1.0;
  Tensor padded(Shape{1, 1, 10, 10});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      padded.at(0, 0, i, j) = img.at(0, 0, std::clamp<std::size_t>(i, 1, 8) - 1, std::clamp<std::size_t>(j, 1, 8) - 1);

  const auto rh = conv2d_oracle(padded, classic_kernel(Direction::Horizontal).weights, 1, 0);
  const auto rv = conv2d_oracle(padded, classic_kernel(Direction::Vertical).weights, 1, 0);
  double best = 0.0;
  for (double x : rh.values) best = std::max(best, std::abs(x));
  EXPECT_EQ(best, 2.0);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const bool step_row = i == 3 || i == 4;
      EXPECT_EQ(std::abs(rh.at(0, 0, i, j)) == best, step_row) << i << "," << j;
      if (!step_row) {
        EXPECT_EQ(rh.at(0, 0, i, j), 0.0);
      }
      EXPECT_EQ(rv.at(0, 0, i, j), 0.0);
    }

  // The layer output is the sum of the four oracle responses.
  SobelLayer layer;
  for (std::size_t d = 0; d < 4; ++d) layer.kernels[d] = classic_kernel(kDirections[d]);
  layer.pool = {0, 0};
  Tape tape;
  const auto y = sobel_layer_forward(layer, tape.constant(img)).value();
  Tensor expected(y.shape);
  for (std::size_t d = 0; d < 4; ++d) {
    const auto r = conv2d_oracle(padded, layer.kernels[d].weights, 1, 0);
    for (std::size_t i = 0; i < r.size(); ++i) expected.values[i] += r.values[i];
  }
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y.values[i], expected.values[i]);
}

TEST(SobelLayer, ChannelMismatchThrows) {
  SbfmConfig cfg;
  cfg.layers = 1;
  const auto s = build_sbfm(cfg, 3, 1);
  Tape tape;
  EXPECT_THROW(sobel_layer_forward(s.layers[0], tape.constant(Tensor(Shape{1, 1, 8, 8}))), DimensionError);
}

TEST(SobelLayer, KernelGradientsMatchFiniteDifferences) {
  SbfmConfig cfg;
  cfg.layers = 1;
  cfg.channels_per_direction = 2;
  auto s = build_sbfm(cfg, 2, 9);
  Rng rng(4);
  const Tensor x = random_tensor({2, 2, 6, 6}, rng);
  const Tensor mix = random_tensor({2, 2, 3, 3}, rng);
  for (std::size_t d = 0; d < 4; ++d) {
    const auto report = grad_check_tensor(s.layers[0].kernels[d].weights, [&](Tape& tape) {
      Var y = sobel_layer_forward(s.layers[0], tape.constant(x), true);
      return sum(mul(y, tape.constant(mix)));
    });
    EXPECT_TRUE(report.passed) << direction_name(kDirections[d]) << " " << report.max_rel_error;
  }
}

TEST(Threshold, HandExample) {
  const Tensor x(Shape{1, 2, 2}, {0.2, 0.9, 0.5, 0.1});
  const auto y = threshold_forward(x, 0.5);
  EXPECT_EQ(y.values, (std::vector<double>{0, 1, 1, 0}));
}

TEST(Threshold, ZeroTGivesAllOnes) {
  Rng rng(2);
  const auto x = random_tensor({2, 3, 4, 4}, rng, 0.01, 1.0);
  for (double v : threshold_forward(x, 0.0).values) EXPECT_EQ(v, 1.0);
}

TEST(Threshold, DegenerateChannelIsAllZeros) {
  Tensor x(Shape{1, 2, 3, 3});
  for (std::size_t i = 9; i < 18; ++i) x.values[i] = 0.3;
  x.values[0] = 5e-13;
  for (double t : {0.0, 0.5, 1.0}) {
    const auto y = threshold_forward(x, t);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.values[i], 0.0);
    for (std::size_t i = 9; i < 18; ++i) EXPECT_EQ(y.values[i], 1.0);
  }
}

TEST(Threshold, RejectsOutOfRangeT) {
  const Tensor x(Shape{1, 2, 2}, 1.0);
  EXPECT_THROW(threshold_forward(x, -0.1), ConfigError);
  EXPECT_THROW(threshold_forward(x, 1.5), ConfigError);
}

TEST(Threshold, BinaryMonotoneAndScaleInvariant) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    auto x = random_tensor({1, 2, 5, 5}, rng, 0.0, 3.0);
    const double t1 = rng.uniform(), t2 = rng.uniform();
    const double lo = std::min(t1, t2), hi = std::max(t1, t2);
    const auto a = threshold_forward(x, lo), b = threshold_forward(x, hi);
    for (std::size_t i = 0; i < a.size(); ++i) {
      ASSERT_TRUE(a.values[i] == 0.0 || a.values[i] == 1.0);
      ASSERT_LE(b.values[i], a.values[i]);
    }
    const double c = rng.uniform(1e-3, 100.0);
    Tensor scaled = x;
    for (double& v : scaled.values) v *= c;
    ASSERT_TRUE(bitwise_equal(threshold_forward(scaled, hi), b)) << "c=" << c;
  }
}

TEST(ThresholdSte, PassesWhereNonzero) {
  const Tensor up(Shape{4}, {1, 2, 3, 4});
  const Tensor x(Shape{4}, {0.5, 0.0, -0.2, 1e-300});
  EXPECT_EQ(threshold_backward_ste(up, x).values, (std::vector<double>{1, 0, 3, 4}));
  EXPECT_EQ(threshold_backward_ste(Tensor(Shape{3}, 1.0), Tensor(Shape{3}, 0.4)).values,
            (std::vector<double>{1, 1, 1}));
}

TEST(ThresholdSte, TapeGradientEqualsFormulaNotFiniteDifference) {
  Rng rng(8);
  Tensor x = random_tensor({1, 2, 3, 3}, rng);
  x.values[4] = 0.0;
  const Tensor w = random_tensor({1, 2, 3, 3}, rng);
  Tape tape;
  Var in = tape.variable(x);
  tape.backward(sum(mul(threshold(in, 0.5), tape.constant(w))));
  const auto g = tape.grad(in);
  const auto expected = threshold_backward_ste(w, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], expected.values[i]);

  const auto report = grad_check([&](Var v) { return sum(mul(threshold(v, 0.5), v.tape().constant(w))); }, x);
  EXPECT_FALSE(report.passed);
}

TEST(BuildSbfm, SingleLayer) {
  SbfmConfig cfg;
  cfg.layers = 1;
  const auto s = build_sbfm(cfg, 3, 1);
  ASSERT_EQ(s.layers.size(), 1u);
  EXPECT_EQ(s.layers[0].channels(), 3u);
  EXPECT_EQ(s.layers[0].filters(), 8u);
  EXPECT_EQ(s.feature_count(32, 32), 8u * 16 * 16);
}

TEST(BuildSbfm, CifarConfiguration) {
  SbfmConfig cfg;  // l = 3, t = 0.8
  EXPECT_EQ(cfg.layers, 3u);
  EXPECT_EQ(cfg.threshold, 0.8);
  const auto s = build_sbfm(cfg, 3, 5);
  ASSERT_EQ(s.layers.size(), 3u);
  EXPECT_EQ(s.layers[0].channels(), 3u);
  EXPECT_EQ(s.layers[1].channels(), 8u);
  EXPECT_EQ(s.layers[2].channels(), 8u);
  EXPECT_TRUE(s.feasible());
  Rng rng(3);
  const auto x = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  const auto y = binary_features(s, x);
  EXPECT_EQ(y.shape, (Shape{2, s.feature_count(32, 32)}));
  for (double v : y.values) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(BuildSbfm, InvalidConfigs) {
  SbfmConfig cfg;
  cfg.layers = 0;
  EXPECT_THROW(build_sbfm(cfg, 3, 1), ConfigError);
  cfg = {};
  cfg.threshold = 1.2;
  EXPECT_THROW(build_sbfm(cfg, 3, 1), ConfigError);
  cfg = {};
  cfg.kernel_size = 4;
  EXPECT_THROW(build_sbfm(cfg, 3, 1), ConfigError);
  cfg = {};
  cfg.layers = 6;
  const auto s = build_sbfm(cfg, 3, 1);
  EXPECT_THROW(s.feature_count(32, 32), ConfigError);
}

TEST(BuildSbfm, ConstantImageHasNoFeatures) {
  // Balanced (noise-free) kernels cancel on flat input; the residue falls
  // under the degenerate-channel cutoff.
  SbfmConfig cfg;
  cfg.init_noise = 0.0;
  const auto s = build_sbfm(cfg, 3, 2);
  const auto y = binary_features(s, Tensor(Shape{1, 3, 32, 32}, 0.42));
  EXPECT_EQ(ones(y), 0u);
}

TEST(ConstraintProperty, HundredTrainingStepsStayFeasible) {
  const auto ds = synthetic_edges(160, 16, 3);
  BackboneConfig b;
  b.blocks = {{4, 1}};
  b.fc_widths = {16};
  b.height = b.width = 16;
  b.classes = 5;
  SbfmConfig sc;
  sc.layers = 2;
  sc.channels_per_direction = 3;
  auto model = build_model(b, sc, 11);
  OptimizerConfig opt;
  opt.learning_rate = 0.5;  // large steps push many weights against their bounds
  SgdState state;
  Rng rng(5);
  std::vector<int> labels(16);
  for (int step = 0; step < 100; ++step) {
    std::vector<std::size_t> rows(16);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i] = rng.below(ds.size());
      labels[i] = ds.labels[rows[i]];
    }
    train_step(model, gather_rows(ds.images, rows), labels, opt, state);
    for (const auto& layer : model.sbfm->layers)
      for (const auto& k : layer.kernels) ASSERT_TRUE(k.feasible()) << "step " << step;
  }
}

TEST(PerturbationStability, EdgeFeaturesBarelyMoveUnderSmallNoise) {
  // Classic Sobel kernels, l = 3, t = 0.8. Measured mean: about 0.06.
  SbfmConfig cfg;
  cfg.init_noise = 0.0;
  const auto s = build_sbfm(cfg, 3, 5);
  const auto ds = synthetic_edges(200, 32, 11);
  Rng rng(99);
  double total = 0.0;
  std::size_t images = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == static_cast<int>(EdgeClass::None)) continue;
    const Tensor x = slice_rows(ds.images, i, 1);
    Tensor noisy = x;
    for (double& v : noisy.values) v = std::clamp(v + rng.uniform(-8.0 / 255.0, 8.0 / 255.0), 0.0, 1.0);
    const auto a = binary_features(s, x), b = binary_features(s, noisy);
    std::size_t diff = 0;
    for (std::size_t k = 0; k < a.size(); ++k) diff += a.values[k] != b.values[k];
    total += static_cast<double>(diff) / static_cast<double>(a.size());
    ++images;
  }
  const double mean = total / static_cast<double>(images);
  RecordProperty("mean_hamming_fraction", std::to_string(mean));
  EXPECT_LT(mean, 0.10);
}
