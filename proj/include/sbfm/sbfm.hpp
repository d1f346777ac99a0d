#pragma once

// Shallow binary feature module: stacked Sobel layers built from four
// sign-constrained directional kernels, followed by a per-channel relative
// threshold that turns edge responses into binary features.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sbfm/errors.hpp"
#include "sbfm/ops.hpp"
#include "sbfm/random.hpp"
#include "sbfm/tape.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

enum class Direction : std::uint8_t { Horizontal, Vertical, PositiveDiagonal, NegativeDiagonal };

inline constexpr std::array<Direction, 4> kDirections = {
    Direction::Horizontal, Direction::Vertical, Direction::PositiveDiagonal,
    Direction::NegativeDiagonal};

inline std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::Horizontal: return "horizontal";
    case Direction::Vertical: return "vertical";
    case Direction::PositiveDiagonal: return "positive_diagonal";
    case Direction::NegativeDiagonal: return "negative_diagonal";
  }
  return "?";
}

// Allowed sign of a kernel cell: [0,1], exactly 0, or [-1,0].
enum class CellSign : std::int8_t { Negative = -1, Zero = 0, Positive = 1 };

// Sign layout of one direction over a K x K grid (row-major cells).
struct DirectionPattern {
  Direction kind = Direction::Horizontal;
  std::size_t size = 3;
  std::vector<CellSign> cells;

  static DirectionPattern make(Direction kind, std::size_t kernel_size = 3) {
    if (kernel_size != 3) {
      throw ConfigError("direction pattern: only 3x3 kernels are implemented, got " +
                        std::to_string(kernel_size));
    }
    using enum CellSign;
    DirectionPattern p{kind, 3, {}};
    switch (kind) {
      case Direction::Horizontal:
        p.cells = {Positive, Positive, Positive, Zero, Zero, Zero, Negative, Negative, Negative};
        break;
      case Direction::Vertical:
        p.cells = {Positive, Zero, Negative, Positive, Zero, Negative, Positive, Zero, Negative};
        break;
      case Direction::PositiveDiagonal:
        p.cells = {Positive, Positive, Zero, Positive, Zero, Negative, Zero, Negative, Negative};
        break;
      case Direction::NegativeDiagonal:
        p.cells = {Zero, Positive, Positive, Negative, Zero, Positive, Negative, Negative, Zero};
        break;
    }
    return p;
  }

  CellSign at(std::size_t row, std::size_t col) const { return cells[row * size + col]; }

  std::vector<bool> mask(CellSign sign) const {
    std::vector<bool> m(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) m[i] = cells[i] == sign;
    return m;
  }
  std::vector<bool> pos_mask() const { return mask(CellSign::Positive); }
  std::vector<bool> zero_mask() const { return mask(CellSign::Zero); }
  std::vector<bool> neg_mask() const { return mask(CellSign::Negative); }
};

// Classic Sobel coefficients for a direction, scaled into [-1, 1].
inline std::array<double, 9> classic_sobel(Direction d) {
  switch (d) {
    case Direction::Horizontal: return {0.5, 1, 0.5, 0, 0, 0, -0.5, -1, -0.5};
    case Direction::Vertical: return {0.5, 0, -0.5, 1, 0, -1, 0.5, 0, -0.5};
    case Direction::PositiveDiagonal: return {1, 0.5, 0, 0.5, 0, -0.5, 0, -0.5, -1};
    case Direction::NegativeDiagonal: return {0, 0.5, 1, -0.5, 0, 0.5, -1, -0.5, 0};
  }
  return {};
}

// F filters over C input channels, all following one direction pattern.
// The pattern applies identically on every input channel.
struct DirectionalKernel {
  DirectionPattern pattern;
  Tensor weights;  // [F, C, K, K]

  std::size_t filters() const { return weights.shape[0]; }
  std::size_t channels() const { return weights.shape[1]; }

  bool feasible() const {
    const std::size_t kk = pattern.size * pattern.size;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const double w = weights.values[i];
      switch (pattern.cells[i % kk]) {
        case CellSign::Positive:
          if (!(w >= 0.0 && w <= 1.0)) return false;
          break;
        case CellSign::Zero:
          if (w != 0.0 || std::signbit(w)) return false;
          break;
        case CellSign::Negative:
          if (!(w >= -1.0 && w <= 0.0)) return false;
          break;
      }
    }
    return true;
  }
};

inline double clamp_to_cell(double w, CellSign sign) {
  switch (sign) {
    case CellSign::Positive: return std::clamp(w, 0.0, 1.0);
    case CellSign::Zero: return 0.0;
    case CellSign::Negative: return std::clamp(w, -1.0, 0.0);
  }
  return w;
}

inline void project_in_place(DirectionalKernel& kernel) {
  const std::size_t kk = kernel.pattern.size * kernel.pattern.size;
  for (std::size_t i = 0; i < kernel.weights.size(); ++i) {
    double& w = kernel.weights.values[i];
    w = clamp_to_cell(w, kernel.pattern.cells[i % kk]);
    if (w == 0.0) w = 0.0;  // canonical +0 so projection is a bitwise fixed point
  }
}

// Clamps every weight into its cell's interval. Idempotent.
inline DirectionalKernel project_kernel(DirectionalKernel kernel) {
  project_in_place(kernel);
  return kernel;
}

// Classic Sobel coefficients plus U(-noise, noise) on the non-zero cells,
// projected back onto the feasible set.
inline DirectionalKernel init_directional_kernel(const DirectionPattern& pattern,
                                                 std::size_t filters, std::size_t channels,
                                                 std::uint64_t seed, double noise = 0.05) {
  if (filters == 0 || channels == 0) {
    throw ConfigError("init_directional_kernel: filters and channels must be >= 1");
  }
  const std::size_t K = pattern.size;
  const auto base = classic_sobel(pattern.kind);
  DirectionalKernel k{pattern, Tensor(Shape{filters, channels, K, K})};
  Rng rng(seed);
  for (std::size_t i = 0; i < k.weights.size(); ++i) {
    const std::size_t cell = i % (K * K);
    double w = base[cell];
    if (pattern.cells[cell] != CellSign::Zero && noise > 0.0) w += rng.uniform(-noise, noise);
    k.weights.values[i] = w;
  }
  project_in_place(k);
  k.weights.requires_grad = true;
  return k;
}

struct PoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
};

// Four parallel directional banks whose responses are summed, then pooled.
struct SobelLayer {
  std::array<DirectionalKernel, 4> kernels;
  std::size_t stride = 1;
  std::size_t padding = 1;  // replicate padding
  PoolSpec pool;

  std::size_t filters() const { return kernels[0].filters(); }
  std::size_t channels() const { return kernels[0].channels(); }

  void validate() const {
    for (const auto& k : kernels) {
      if (k.weights.shape != kernels[0].weights.shape) {
        throw DimensionError("sobel layer: directional kernels disagree on shape");
      }
    }
    if (stride == 0) throw ConfigError("sobel layer: stride must be positive");
  }
};

namespace detail {

template <typename Layer, typename Bind>
Var sobel_layer_forward_with(Layer& layer, Var x, Bind&& bind) {
  if (x.value().rank() != 4 || x.value().shape[1] != layer.channels()) {
    throw DimensionError("sobel layer: expects " + std::to_string(layer.channels()) +
                         " input channels, got shape " + shape_str(x.value().shape));
  }
  const Var padded = replicate_pad(x, layer.padding);
  Var sum_var;
  for (std::size_t d = 0; d < 4; ++d) {
    Var response = conv2d(padded, bind(layer.kernels[d].weights), layer.stride, 0);
    sum_var = d == 0 ? response : add(sum_var, response);
  }
  if (layer.pool.window == 0) return sum_var;
  return maxpool2d(sum_var, layer.pool.window, layer.pool.stride);
}

}  // namespace detail

// Sum of the four directional responses followed by the layer's max-pool.
// Borders are padded by replication, so flat regions touching the image edge
// give no response.
// Kernels enter the tape read-only; use the model's training path to get
// kernel gradients.
inline Var sobel_layer_forward(const SobelLayer& layer, Var x) {
  return detail::sobel_layer_forward_with(layer, x,
                                          [&](const Tensor& w) { return x.tape().reference(w); });
}

inline Var sobel_layer_forward(SobelLayer& layer, Var x, bool track_grads) {
  return detail::sobel_layer_forward_with(layer, x, [&](Tensor& w) {
    return track_grads ? x.tape().parameter(w) : x.tape().reference(w);
  });
}

inline constexpr double kDegenerateChannelMax = 1e-12;

// Per (item, channel): 1 where x >= t * max(channel), else 0. A channel whose
// max is below 1e-12 outputs all zeros. Input layout [B, N, P, Q] or [N, P, Q].
inline Tensor threshold_forward(const Tensor& x, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("threshold: t must lie in [0,1], got " + std::to_string(t));
  }
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("threshold: expected [N,P,Q] or [B,N,P,Q], got " + shape_str(x.shape));
  }
  const std::size_t plane = x.shape[x.rank() - 1] * x.shape[x.rank() - 2];
  const std::size_t planes = plane == 0 ? 0 : x.size() / plane;
  Tensor out(x.shape);
  for (std::size_t c = 0; c < planes; ++c) {
    const double* src = x.values.data() + c * plane;
    double* dst = out.values.data() + c * plane;
    const double mx = plane == 0 ? 0.0 : *std::max_element(src, src + plane);
    if (!(mx >= kDegenerateChannelMax)) continue;
    const double level = t * mx;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] >= level ? 1.0 : 0.0;
  }
  return out;
}

// Straight-through surrogate: upstream * [|x| > 0].
inline Tensor threshold_backward_ste(const Tensor& upstream, const Tensor& x) {
  if (upstream.shape != x.shape) {
    throw DimensionError("threshold_backward_ste: shape mismatch " + shape_str(upstream.shape) +
                         " vs " + shape_str(x.shape));
  }
  Tensor g(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i)
    g.values[i] = std::abs(x.values[i]) > 0.0 ? upstream.values[i] : 0.0;
  return g;
}

// Differentiable wrapper: hard threshold forward, straight-through backward.
inline Var threshold(Var input, double t) {
  Tensor out = threshold_forward(input.value(), t);
  return input.tape().record(std::move(out), {input}, [x_id = input.id()](Tape& tape,
                                                                           std::size_t self) {
    const Tensor& x = tape.value(x_id);
    const auto dy = tape.grad(self);
    auto dx = tape.accumulator(x_id);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (std::abs(x.values[i]) > 0.0) dx[i] += dy[i];
  });
}

struct SbfmConfig {
  std::size_t layers = 3;                 // l
  double threshold = 0.8;                 // t
  std::size_t channels_per_direction = 8;
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  // One entry per layer; a single entry applies to every layer; empty means 2x2/2.
  std::vector<PoolSpec> pooling;
  bool frozen = false;
  double init_noise = 0.05;

  PoolSpec pool_for(std::size_t layer) const {
    if (pooling.empty()) return PoolSpec{};
    return pooling.size() == 1 ? pooling[0] : pooling.at(layer);
  }

  void validate() const {
    if (layers < 1) throw ConfigError("sbfm: l must be >= 1");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("sbfm: t must lie in [0,1]");
    if (channels_per_direction < 1) throw ConfigError("sbfm: channels_per_direction must be >= 1");
    if (kernel_size % 2 == 0 || kernel_size == 0) throw ConfigError("sbfm: kernel_size must be odd");
    if (kernel_size != 3) throw ConfigError("sbfm: only kernel_size 3 is implemented");
    if (stride < 1) throw ConfigError("sbfm: stride must be >= 1");
    if (pooling.size() > 1 && pooling.size() != layers) {
      throw ConfigError("sbfm: pooling schedule needs 1 or l entries");
    }
    for (const auto& p : pooling) {
      if ((p.window == 0) != (p.stride == 0)) {
        throw ConfigError("sbfm: pooling window and stride must both be zero (off) or positive");
      }
    }
  }
};

// l Sobel layers, then |.| and the threshold; output flattened to [B, features].
struct Sbfm {
  SbfmConfig config;
  std::vector<SobelLayer> layers;

  // Spatial extent of the binary map for an H x W input.
  std::pair<std::size_t, std::size_t> output_extent(std::size_t h, std::size_t w) const {
    for (const auto& layer : layers) {
      const std::size_t k = layer.kernels[0].pattern.size;
      if (k > h + 2 * layer.padding || k > w + 2 * layer.padding) {
        throw ConfigError("sbfm: input too small for Sobel layer");
      }
      h = (h + 2 * layer.padding - k) / layer.stride + 1;
      w = (w + 2 * layer.padding - k) / layer.stride + 1;
      if (layer.pool.window > 0) {
        if (layer.pool.window > h || layer.pool.window > w) {
          throw ConfigError("sbfm: pooling window larger than feature map (" + std::to_string(h) +
                            "x" + std::to_string(w) + ")");
        }
        h = (h - layer.pool.window) / layer.pool.stride + 1;
        w = (w - layer.pool.window) / layer.pool.stride + 1;
      }
    }
    return {h, w};
  }

  std::size_t feature_count(std::size_t h, std::size_t w) const {
    const auto [oh, ow] = output_extent(h, w);
    return layers.back().filters() * oh * ow;
  }

  std::vector<DirectionalKernel*> kernels() {
    std::vector<DirectionalKernel*> out;
    for (auto& layer : layers)
      for (auto& k : layer.kernels) out.push_back(&k);
    return out;
  }

  bool feasible() const {
    for (const auto& layer : layers)
      for (const auto& k : layer.kernels)
        if (!k.feasible()) return false;
    return true;
  }

  void project() {
    for (auto* k : kernels()) project_in_place(*k);
  }
};

inline Sbfm build_sbfm(const SbfmConfig& cfg, std::size_t in_channels, std::uint64_t seed) {
  cfg.validate();
  if (in_channels == 0) throw ConfigError("sbfm: input must have at least one channel");
  Sbfm s{cfg, {}};
  std::size_t channels = in_channels;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    SobelLayer layer;
    for (std::size_t d = 0; d < 4; ++d) {
      layer.kernels[d] = init_directional_kernel(
          DirectionPattern::make(kDirections[d], cfg.kernel_size), cfg.channels_per_direction,
          channels, derive_seed(seed, l * 4 + d), cfg.init_noise);
      layer.kernels[d].weights.requires_grad = !cfg.frozen;
    }
    layer.stride = cfg.stride;
    layer.padding = cfg.kernel_size / 2;
    layer.pool = cfg.pool_for(l);
    s.layers.push_back(std::move(layer));
    channels = cfg.channels_per_direction;
  }
  return s;
}

namespace detail {

template <typename LayerFwd>
Var sbfm_forward_with(const Sbfm& module, Var x, LayerFwd&& layer_fwd) {
  Var h = x;
  for (std::size_t l = 0; l < module.layers.size(); ++l) h = layer_fwd(l, h);
  return flatten(threshold(absolute(h), module.config.threshold));
}

}  // namespace detail

// Binary feature vector [B, features]; kernels read-only on the tape.
inline Var sbfm_forward(const Sbfm& module, Var x) {
  return detail::sbfm_forward_with(module, x, [&](std::size_t l, Var h) {
    return sobel_layer_forward(module.layers[l], h);
  });
}

// Same, recording kernels as trainable parameters (unless frozen).
inline Var sbfm_forward_train(Sbfm& module, Var x) {
  return detail::sbfm_forward_with(module, x, [&](std::size_t l, Var h) {
    return sobel_layer_forward(module.layers[l], h, !module.config.frozen);
  });
}

// Convenience evaluation outside of training.
inline Tensor binary_features(const Sbfm& module, const Tensor& images) {
  Tape tape;
  return sbfm_forward(module, tape.reference(images)).value();
}

}  // namespace sbfm
