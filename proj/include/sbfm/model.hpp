#pragma once

// Backbone CNN with an optional SBFM branch whose binary features are
// concatenated with the backbone features ahead of the fully connected head.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "sbfm/data.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/ops.hpp"
#include "sbfm/random.hpp"
#include "sbfm/sbfm.hpp"
#include "sbfm/tape.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

struct ConvBlock {
  std::size_t channels = 32;
  std::size_t convs = 2;
};

// 3x3 same-padded conv + ReLU stacks, 2x2 max-pool after each block.
struct BackboneConfig {
  std::vector<ConvBlock> blocks{{32, 2}, {64, 2}, {128, 2}};
  std::vector<std::size_t> fc_widths{256};
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;

  static BackboneConfig mini_vgg() { return BackboneConfig{}; }

  std::pair<std::size_t, std::size_t> output_extent() const {
    std::size_t h = height, w = width;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (h < 2 || w < 2) {
        throw ConfigError("backbone: spatial size collapses before block " + std::to_string(b));
      }
      h /= 2;
      w /= 2;
    }
    return {h, w};
  }

  std::size_t feature_width() const {
    const auto [h, w] = output_extent();
    const std::size_t c = blocks.empty() ? in_channels : blocks.back().channels;
    return c * h * w;
  }

  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("backbone: empty input shape");
    if (classes < 2) throw ConfigError("backbone: need at least two classes");
    for (const auto& b : blocks) {
      if (b.channels == 0 || b.convs == 0) throw ConfigError("backbone: empty conv block");
    }
    for (std::size_t w : fc_widths) {
      if (w == 0) throw ConfigError("backbone: zero-width fc layer");
    }
    const auto [h, w] = output_extent();
    if (h < 1 || w < 1) throw ConfigError("backbone: output spatial size must be >= 1");
  }
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct FusedModel {
  struct Conv {
    Tensor weight;  // [F, C, 3, 3]
    Tensor bias;    // [F]
  };
  struct Dense {
    Tensor weight;  // [D, M]
    Tensor bias;    // [M]
  };

  BackboneConfig backbone_config;
  std::optional<Sbfm> sbfm;
  std::vector<std::vector<Conv>> blocks;
  std::vector<Dense> head;
  ChannelStats normalization;

  bool fused() const { return sbfm.has_value(); }
  std::size_t backbone_width() const { return backbone_config.feature_width(); }
  std::size_t sbfm_width() const {
    return sbfm ? sbfm->feature_count(backbone_config.height, backbone_config.width) : 0;
  }
  std::size_t head_input_width() const { return backbone_width() + sbfm_width(); }

  // Logits [B, K] from raw [0,1] images; parameters enter the tape read-only.
  Var forward(Var x) const {
    return forward_impl(*this, x, [&](const Tensor& t) { return x.tape().reference(t); });
  }

  // Same graph with trainable parameters recorded for gradient accumulation.
  Var forward_train(Var x) {
    return forward_impl(*this, x, [&](Tensor& t) { return x.tape().parameter(t); });
  }

  std::vector<NamedTensor> parameters() {
    std::vector<NamedTensor> out;
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t c = 0; c < blocks[b].size(); ++c) {
        const std::string p = "backbone.block" + std::to_string(b) + ".conv" + std::to_string(c);
        out.push_back({p + ".weight", &blocks[b][c].weight});
        out.push_back({p + ".bias", &blocks[b][c].bias});
      }
    if (sbfm) {
      for (std::size_t l = 0; l < sbfm->layers.size(); ++l)
        for (std::size_t d = 0; d < 4; ++d) {
          out.push_back({"sbfm.layer" + std::to_string(l) + "." +
                             std::string(direction_name(kDirections[d])),
                         &sbfm->layers[l].kernels[d].weights});
        }
    }
    for (std::size_t i = 0; i < head.size(); ++i) {
      out.push_back({"head.fc" + std::to_string(i) + ".weight", &head[i].weight});
      out.push_back({"head.fc" + std::to_string(i) + ".bias", &head[i].bias});
    }
    return out;
  }

  // Parameters updated by the optimizer (frozen SBFM kernels excluded).
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    for (auto& p : parameters())
      if (p.tensor->requires_grad) out.push_back(p.tensor);
    return out;
  }

  void project_constraints() {
    if (sbfm) sbfm->project();
  }

  bool constraints_hold() const { return !sbfm || sbfm->feasible(); }

 private:
  template <typename Self, typename Bind>
  static Var forward_impl(Self& self, Var x, Bind&& bind) {
    const Tensor& in = x.value();
    const auto& cfg = self.backbone_config;
    if (in.rank() != 4 || in.shape[1] != cfg.in_channels || in.shape[2] != cfg.height ||
        in.shape[3] != cfg.width) {
      throw DimensionError("model: expected input [B," + std::to_string(cfg.in_channels) + "," +
                           std::to_string(cfg.height) + "," + std::to_string(cfg.width) +
                           "], got " + shape_str(in.shape));
    }
    Var z = standardize(x, self.normalization.mean, self.normalization.std);
    Var h = z;
    for (auto& block : self.blocks) {
      for (auto& conv : block) {
        h = relu(add_channel_bias(conv2d(h, bind(conv.weight), 1, 1), bind(conv.bias)));
      }
      h = maxpool2d(h, 2, 2);
    }
    Var features = flatten(h);
    if (self.sbfm) {
      Var binary = [&] {
        if constexpr (std::is_const_v<Self>) {
          return sbfm_forward(*self.sbfm, z);
        } else {
          return sbfm_forward_train(*self.sbfm, z);
        }
      }();
      features = concat(features, binary);
    }
    for (std::size_t i = 0; i < self.head.size(); ++i) {
      features = linear(features, bind(self.head[i].weight), bind(self.head[i].bias));
      if (i + 1 < self.head.size()) features = relu(features);
    }
    return features;
  }
};

namespace detail {

inline void he_normal(Tensor& t, std::size_t fan_in, Rng& rng, double gain = 2.0) {
  const double sd = std::sqrt(gain / static_cast<double>(fan_in));
  for (double& v : t.values) v = sd * rng.normal();
}

}  // namespace detail

// Deterministic given seed: He-normal conv/fc weights, zero biases, classic
// Sobel initialisation for the SBFM kernels. Baseline when `sbfm_cfg` is empty.
inline FusedModel build_model(const BackboneConfig& backbone,
                              const std::optional<SbfmConfig>& sbfm_cfg, std::uint64_t seed) {
  backbone.validate();
  FusedModel m;
  m.backbone_config = backbone;
  m.normalization = ChannelStats::identity(backbone.in_channels);
  Rng rng(derive_seed(seed, 0));

  std::size_t channels = backbone.in_channels;
  for (const auto& block : backbone.blocks) {
    std::vector<FusedModel::Conv> convs;
    for (std::size_t c = 0; c < block.convs; ++c) {
      FusedModel::Conv conv{Tensor(Shape{block.channels, channels, 3, 3}),
                            Tensor(Shape{block.channels})};
      detail::he_normal(conv.weight, channels * 9, rng);
      conv.weight.requires_grad = conv.bias.requires_grad = true;
      convs.push_back(std::move(conv));
      channels = block.channels;
    }
    m.blocks.push_back(std::move(convs));
  }

  if (sbfm_cfg) {
    m.sbfm = build_sbfm(*sbfm_cfg, backbone.in_channels, derive_seed(seed, 1));
    // Validates that the pooling schedule fits the input.
    (void)m.sbfm->feature_count(backbone.height, backbone.width);
  }

  std::size_t width = m.head_input_width();
  std::vector<std::size_t> outs = backbone.fc_widths;
  outs.push_back(backbone.classes);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    FusedModel::Dense d{Tensor(Shape{width, outs[i]}), Tensor(Shape{outs[i]})};
    detail::he_normal(d.weight, width, rng, i + 1 < outs.size() ? 2.0 : 1.0);
    d.weight.requires_grad = d.bias.requires_grad = true;
    m.head.push_back(std::move(d));
    width = outs[i];
  }
  return m;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.shape[0], K = logits.shape[1];
  std::vector<int> out(B);
  for (std::size_t n = 0; n < B; ++n) {
    const double* row = logits.values.data() + n * K;
    out[n] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

// Any type with `Var forward(Var) const` producing [B, K] logits.
template <typename M>
concept Classifier = requires(const M& m, Var x) {
  { m.forward(x) } -> std::same_as<Var>;
};

template <Classifier M>
std::vector<int> predict(const M& model, const Tensor& images) {
  Tape tape;
  return argmax_rows(model.forward(tape.reference(images)).value());
}

// Fraction of samples whose argmax logit equals the label.
template <Classifier M>
double evaluate(const M& model, const LabeledDataset& ds, std::size_t batch_size = 100) {
  if (ds.empty()) throw ConfigError("evaluate: empty dataset");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.size() - start);
    const auto pred = predict(model, slice_rows(ds.images, start, n));
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == ds.labels[start + i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace sbfm
