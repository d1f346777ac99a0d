#pragma once

// FGSM: x_adv = clip(x + eps * sign(dL/dx), clip_min, clip_max), with the
// gradient taken w.r.t. the raw image (normalisation sits inside the model).

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sbfm/data.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/model.hpp"
#include "sbfm/ops.hpp"
#include "sbfm/tape.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double clip_min = 0.0;
  double clip_max = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("attack: epsilon must be >= 0, got " + std::to_string(epsilon));
    if (epsilon > 1.0) throw ConfigError("attack: epsilon must be <= 1, got " + std::to_string(epsilon));
    if (!(clip_min < clip_max)) throw ConfigError("attack: clip_min must be < clip_max");
  }
};

inline std::vector<double> default_epsilons() {
  return {0.1 / 255.0, 0.5 / 255.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 5.0 / 255.0, 8.0 / 255.0};
}

// Gradient of the mean cross-entropy w.r.t. the input batch.
template <Classifier M>
Tensor input_gradient(const M& model, const Tensor& x, std::span<const int> labels) {
  Tape tape;
  Var in = tape.variable(x);
  Var loss = softmax_cross_entropy(model.forward(in), labels);
  tape.backward(loss);
  const auto g = tape.grad(in);
  return Tensor(x.shape, std::vector<double>(g.begin(), g.end()));
}

inline double sign_of(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Perturbs a batch given its input gradient.
inline Tensor fgsm_from_gradient(const Tensor& x, const Tensor& grad, const AttackConfig& cfg) {
  cfg.validate();
  if (grad.shape != x.shape) throw DimensionError("fgsm: gradient shape does not match input");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.values[i];
    if (v < cfg.clip_min || v > cfg.clip_max) {
      throw ContractError("fgsm: input value " + std::to_string(v) + " at " + std::to_string(i) +
                          " outside clip range");
    }
    out.values[i] = std::clamp(v + cfg.epsilon * sign_of(grad.values[i]), cfg.clip_min, cfg.clip_max);
  }
  return out;
}

template <Classifier M>
Tensor fgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) {
    // Still enforce the range precondition.
    return fgsm_from_gradient(x, Tensor(x.shape), cfg);
  }
  return fgsm_from_gradient(x, input_gradient(model, x, labels), cfg);
}

struct AttackRecord {
  std::string model_id;
  double epsilon = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

struct AttackReport {
  std::vector<AttackRecord> records;
};

// Adversarial accuracy for each epsilon over the whole dataset. The input
// gradient is computed once per batch and reused for every epsilon.
template <Classifier M>
AttackReport attack_sweep(const M& model, const LabeledDataset& ds, std::span<const double> epsilons,
                          const std::string& model_id = "model", std::size_t batch_size = 100) {
  if (epsilons.empty()) throw ConfigError("attack_sweep: empty epsilon list");
  if (ds.empty()) throw ConfigError("attack_sweep: empty dataset");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    AttackConfig{epsilons[i]}.validate();
    if (i > 0 && epsilons[i] < epsilons[i - 1]) throw ConfigError("attack_sweep: epsilons must be ascending");
  }
  std::vector<std::size_t> correct(epsilons.size(), 0);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.size() - start);
    const Tensor x = slice_rows(ds.images, start, n);
    const std::span<const int> y(ds.labels.data() + start, n);
    const bool need_grad = std::any_of(epsilons.begin(), epsilons.end(), [](double e) { return e > 0.0; });
    const Tensor g = need_grad ? input_gradient(model, x, y) : Tensor(x.shape);
    for (std::size_t e = 0; e < epsilons.size(); ++e) {
      const auto pred = predict(model, fgsm_from_gradient(x, g, AttackConfig{epsilons[e]}));
      for (std::size_t i = 0; i < n; ++i) correct[e] += pred[i] == y[i];
    }
  }
  AttackReport report;
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    report.records.push_back({model_id, epsilons[e],
                              static_cast<double>(correct[e]) / static_cast<double>(ds.size()), ds.size()});
  }
  return report;
}

}  // namespace sbfm
