#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "sbfm/data.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/model.hpp"
#include "sbfm/ops.hpp"
#include "sbfm/optim.hpp"
#include "sbfm/random.hpp"
#include "sbfm/tape.hpp"

namespace sbfm {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  OptimizerConfig optimizer;
  // Step decay: lr *= lr_gamma every lr_step_epochs epochs (0 disables).
  std::size_t lr_step_epochs = 0;
  double lr_gamma = 0.1;
  // Restore the parameters of the best-validation epoch when training ends.
  bool keep_best = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean training loss over the epoch's steps
  double train_accuracy = 0.0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;    // wall-clock of the optimisation steps only
  bool constraints_hold = true;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();

  double final_train_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().train_accuracy; }
  double mean_epoch_seconds() const {
    if (epochs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : epochs) s += e.seconds;
    return s / static_cast<double>(epochs.size());
  }
};

struct DataSplits {
  const LabeledDataset& train;
  const LabeledDataset* val = nullptr;
  const LabeledDataset* test = nullptr;
};

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

// One SGD step on a batch, followed by projection of the directional kernels.
inline StepResult train_step(FusedModel& model, const Tensor& images, std::span<const int> labels,
                             const OptimizerConfig& optimizer, SgdState& state) {
  auto params = model.trainable();
  for (Tensor* p : params) p->zero_grad();
  StepResult r;
  {
    Tape tape;
    Var logits = model.forward_train(tape.constant(images));
    Var loss = softmax_cross_entropy(logits, labels);
    r.loss = loss.value()[0];
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) r.correct += pred[i] == labels[i];
    tape.backward(loss);
  }
  sgd_step(params, optimizer, state);
  model.project_constraints();
  return r;
}

// Mini-batch SGD with a seeded per-epoch shuffle. When keep_best is set and a
// validation split is present, `model` ends holding the best-validation
// parameters; test accuracy is measured on those.
inline TrainReport train(FusedModel& model, const DataSplits& data, const TrainOptions& opt,
                         SgdState* state_out = nullptr,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (data.train.empty()) throw ConfigError("train: empty training set");
  if (opt.epochs == 0 || opt.batch_size == 0) throw ConfigError("train: epochs and batch_size must be positive");
  opt.optimizer.validate();

  TrainReport report;
  SgdState state;
  std::optional<FusedModel> best;
  std::vector<std::size_t> order(data.train.size());
  std::vector<int> batch_labels;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    OptimizerConfig step_cfg = opt.optimizer;
    if (opt.lr_step_epochs > 0) {
      step_cfg.learning_rate *=
          std::pow(opt.lr_gamma, static_cast<double>(epoch / opt.lr_step_epochs));
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(opt.seed, 1000 + epoch));
    rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch + 1;
    double loss_sum = 0.0;
    std::size_t correct = 0, steps = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, n);
      Tensor images = gather_rows(data.train.images, rows);
      batch_labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) batch_labels[i] = data.train.labels[rows[i]];
      const auto r = train_step(model, images, batch_labels, step_cfg, state);
      loss_sum += r.loss;
      correct += r.correct;
      ++steps;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.loss = loss_sum / static_cast<double>(steps);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.constraints_hold = model.constraints_hold();
    if (data.val && !data.val->empty()) {
      rec.val_accuracy = evaluate(model, *data.val);
      if (!best || rec.val_accuracy > report.best_val_accuracy) {
        report.best_val_accuracy = rec.val_accuracy;
        report.best_epoch = rec.epoch;
        if (opt.keep_best) best = model;
      }
    } else {
      report.best_epoch = rec.epoch;
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (opt.keep_best && best) model = std::move(*best);
  if (data.test && !data.test->empty()) report.test_accuracy = evaluate(model, *data.test);
  if (state_out) *state_out = std::move(state);
  return report;
}

}  // namespace sbfm
