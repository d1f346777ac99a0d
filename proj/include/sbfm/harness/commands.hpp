#pragma once

// train / attack / sweep drivers. Each returns a process exit code and writes
// its files under RunConfig::out only after inputs have been validated.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sbfm/attack.hpp"
#include "sbfm/checkpoint.hpp"
#include "sbfm/data.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/harness/config.hpp"
#include "sbfm/harness/csv.hpp"
#include "sbfm/harness/svg.hpp"
#include "sbfm/io.hpp"
#include "sbfm/model.hpp"
#include "sbfm/train.hpp"

namespace sbfm::harness {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitBadInput = 2,
  kExitCheckpoint = 3,
};

struct RunData {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  ChannelStats stats;
};

// Loads the configured dataset, applies the per-class caps and the
// stratified validation split. Statistics come from the training split and
// are cached in the sidecar file (written later, alongside the outputs).
inline RunData load_run_data(const RunConfig& cfg) {
  LabeledDataset full, test;
  if (cfg.dataset == "synthetic") {
    full = synthetic_edges(cfg.synthetic_train, cfg.synthetic_size, cfg.synthetic_seed);
    test = synthetic_edges(cfg.synthetic_test, cfg.synthetic_size, derive_seed(cfg.synthetic_seed, 1));
  } else if (cfg.dataset == "cifar10") {
    if (cfg.data_dir.empty()) throw IngestError("cifar10: data_dir is not set");
    auto splits = load_cifar10(cfg.data_dir);
    full = std::move(splits.train);
    test = std::move(splits.test);
  } else {
    full = load_idx(cfg.idx_train_images, cfg.idx_train_labels);
    test = load_idx(cfg.idx_test_images, cfg.idx_test_labels);
  }
  full = cap_per_class(full, cfg.subset_per_class);
  test = cap_per_class(test, cfg.test_subset_per_class);
  if (full.empty() || test.empty()) throw IngestError("dataset is empty after applying caps");

  RunData d;
  auto [train, val] = stratified_split(full, SplitSpec{cfg.val_fraction, cfg.split_seed, true});
  d.train = std::move(train);
  d.val = std::move(val);
  d.test = std::move(test);
  const auto sidecar = cfg.stats_path();
  d.stats = std::filesystem::exists(sidecar) ? load_stats_sidecar(sidecar) : compute_channel_stats(d.train);
  if (d.stats.mean.size() != d.train.channels()) {
    throw IngestError("normalization sidecar " + sidecar.string() + " has the wrong channel count");
  }
  return d;
}

inline void persist_stats(const RunConfig& cfg, const RunData& d) {
  const auto sidecar = cfg.stats_path();
  if (std::filesystem::exists(sidecar)) return;
  if (sidecar.has_parent_path()) std::filesystem::create_directories(sidecar.parent_path());
  save_stats_sidecar(sidecar, d.stats);
}

inline BackboneConfig backbone_for(const RunConfig& cfg, const LabeledDataset& ds) {
  BackboneConfig b;
  b.blocks = cfg.blocks;
  b.fc_widths = cfg.fc_widths;
  b.in_channels = ds.channels();
  b.height = ds.height();
  b.width = ds.width();
  b.classes = ds.num_classes();
  return b;
}

struct TrainedModel {
  FusedModel model;
  TrainReport report;
  SgdState state;
};

inline TrainedModel train_model(const RunConfig& cfg, const RunData& data,
                                const std::optional<SbfmConfig>& sbfm_cfg, std::uint64_t seed,
                                std::ostream* log = nullptr, const std::string& tag = "") {
  TrainedModel t{build_model(backbone_for(cfg, data.train), sbfm_cfg, seed), {}, {}};
  t.model.normalization = data.stats;
  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.seed = seed;
  opt.optimizer = cfg.optimizer;
  opt.lr_step_epochs = cfg.lr_step_epochs;
  opt.lr_gamma = cfg.lr_gamma;
  t.report = train(t.model, DataSplits{data.train, &data.val, &data.test}, opt, &t.state,
                   [&](const EpochRecord& e) {
                     if (log) {
                       *log << tag << " epoch " << e.epoch << "/" << cfg.epochs << " loss " << e.loss
                            << " train " << e.train_accuracy << " val " << e.val_accuracy << " ("
                            << e.seconds << " s)\n";
                     }
                   });
  return t;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Sample standard deviation (n - 1); zero for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return {std::nan(""), std::nan("")};
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

inline std::optional<SbfmConfig> sbfm_for(const RunConfig& cfg, const std::string& model) {
  if (model == "baseline") return std::nullopt;
  return cfg.sbfm;
}

inline std::string checkpoint_name(const std::string& model, std::uint64_t seed) {
  return model + "_seed" + std::to_string(seed) + ".ckpt";
}

inline int report_input_error(std::ostream& err, const std::exception& e) {
  err << "error: " << e.what() << "\n";
  return kExitBadInput;
}

// Trains every configured model for every seed. Outputs:
//   <model>_seed<N>.ckpt, epochs.csv, <model>_summary.csv, <model>_timing.csv
inline int cmd_train(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  RunData data;
  try {
    cfg.validate();
    data = load_run_data(cfg);
    for (const auto& name : cfg.models) (void)build_model(backbone_for(cfg, data.train), sbfm_for(cfg, name), 0);
  } catch (const ConfigError& e) {
    return report_input_error(err, e);
  } catch (const IngestError& e) {
    return report_input_error(err, e);
  }

  CsvTable epochs({"model", "seed", "epoch", "loss", "train_accuracy", "val_accuracy", "constraints_hold"});
  std::map<std::string, std::vector<std::pair<std::uint64_t, TrainReport>>> results;
  for (const auto& name : cfg.models) {
    for (std::uint64_t seed : cfg.seeds) {
      auto t = train_model(cfg, data, sbfm_for(cfg, name), seed, &log, name + "/seed" + std::to_string(seed));
      for (const auto& e : t.report.epochs) {
        epochs.add_row({name, std::to_string(seed), std::to_string(e.epoch), format_number(e.loss),
                        format_number(e.train_accuracy), format_number(e.val_accuracy),
                        e.constraints_hold ? "true" : "false"});
      }
      TrainingMetadata meta{t.report.best_epoch, seed, cfg.optimizer, name};
      std::filesystem::create_directories(cfg.out);
      save_checkpoint(t.model, cfg.out / checkpoint_name(name, seed), meta, &t.state);
      results[name].emplace_back(seed, std::move(t.report));
    }
  }

  persist_stats(cfg, data);
  write_file_atomic(cfg.out / "epochs.csv", epochs.str());
  for (const auto& name : cfg.models) {
    CsvTable summary({"model", "seed", "train_accuracy", "train_accuracy_std", "test_accuracy",
                      "test_accuracy_std", "best_epoch", "best_val_accuracy"});
    CsvTable timing({"model", "seed", "time_per_epoch_s", "time_per_epoch_s_std"});
    std::vector<double> tr, te, tpe;
    for (const auto& [seed, rep] : results[name]) {
      tr.push_back(rep.final_train_accuracy());
      te.push_back(rep.test_accuracy);
      tpe.push_back(rep.mean_epoch_seconds());
      summary.add_row({name, std::to_string(seed), format_number(tr.back()), "", format_number(te.back()), "",
                       std::to_string(rep.best_epoch), format_number(rep.best_val_accuracy)});
      timing.add_row({name, std::to_string(seed), format_number(tpe.back()), ""});
    }
    const auto a = mean_std(tr), b = mean_std(te), c = mean_std(tpe);
    summary.add_row({name, "mean", format_number(a.mean), format_number(a.std), format_number(b.mean),
                     format_number(b.std), "", ""});
    timing.add_row({name, "mean", format_number(c.mean), format_number(c.std)});
    write_file_atomic(cfg.out / (name + "_summary.csv"), summary.str());
    write_file_atomic(cfg.out / (name + "_timing.csv"), timing.str());
  }
  log << "wrote results to " << cfg.out.string() << "\n";
  return kExitOk;
}

inline void check_architecture(const FusedModel& m, const LabeledDataset& ds, const std::string& path) {
  const auto& b = m.backbone_config;
  if (b.in_channels != ds.channels() || b.height != ds.height() || b.width != ds.width() ||
      b.classes != ds.num_classes()) {
    throw CheckpointError("checkpoint " + path + " expects input [" + std::to_string(b.in_channels) + "," +
                          std::to_string(b.height) + "," + std::to_string(b.width) + "] with " +
                          std::to_string(b.classes) + " classes; dataset provides [" +
                          std::to_string(ds.channels()) + "," + std::to_string(ds.height()) + "," +
                          std::to_string(ds.width()) + "] with " + std::to_string(ds.num_classes()));
  }
}

inline std::string model_id_for(const std::filesystem::path& ckpt) { return ckpt.stem().string(); }

// FGSM sweep for each checkpoint on the test split. Outputs attack.csv and
// attack.svg (one polyline per checkpoint).
inline int cmd_attack(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  RunData data;
  try {
    cfg.validate();
    if (cfg.checkpoints.empty()) throw ConfigError("attack: no checkpoints given");
    if (cfg.epsilons.empty()) throw ConfigError("attack: empty epsilon list");
    for (std::size_t i = 1; i < cfg.epsilons.size(); ++i) {
      if (cfg.epsilons[i] < cfg.epsilons[i - 1]) throw ConfigError("attack: epsilons must be ascending");
    }
    data = load_run_data(cfg);
  } catch (const ConfigError& e) {
    return report_input_error(err, e);
  } catch (const IngestError& e) {
    return report_input_error(err, e);
  }

  std::vector<std::pair<std::string, FusedModel>> models;
  try {
    for (const auto& p : cfg.checkpoints) {
      auto ck = load_checkpoint(p);
      check_architecture(ck.model, data.test, p.string());
      models.emplace_back(model_id_for(p), std::move(ck.model));
    }
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  }

  CsvTable table({"model", "epsilon", "accuracy", "n"});
  std::vector<PlotSeries> series;
  for (const auto& [id, model] : models) {
    const auto report = attack_sweep(model, data.test, cfg.epsilons, id);
    PlotSeries s{id, {}};
    for (const auto& r : report.records) {
      table.add_row({r.model_id, format_number(r.epsilon), format_number(r.accuracy), std::to_string(r.samples)});
      s.points.emplace_back(r.epsilon * 255.0, r.accuracy);
      log << id << " eps " << r.epsilon * 255.0 << "/255 accuracy " << r.accuracy << "\n";
    }
    series.push_back(std::move(s));
  }
  write_file_atomic(cfg.out / "attack.csv", table.str());
  write_file_atomic(cfg.out / "attack.svg",
                    render_line_plot(series, {"Accuracy under FGSM", "epsilon (x/255)", "accuracy"}));
  return kExitOk;
}

// One fused model per (l, t) cell and seed. A failing cell is recorded as
// FAILED and the sweep moves on; the exit code is nonzero if any cell failed.
// Outputs grid.csv and grid_timing.csv.
inline int cmd_sweep(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  RunData data;
  try {
    cfg.validate();
    data = load_run_data(cfg);
  } catch (const ConfigError& e) {
    return report_input_error(err, e);
  } catch (const IngestError& e) {
    return report_input_error(err, e);
  }

  CsvTable grid({"l", "t", "status", "seeds", "adv_accuracy", "adv_accuracy_std", "train_accuracy",
                 "train_accuracy_std", "test_accuracy", "test_accuracy_std", "error"});
  CsvTable timing({"l", "t", "status", "time_per_epoch_s", "time_per_epoch_s_std"});
  bool any_failed = false;
  const std::vector<double> eps{cfg.sweep_epsilon};
  for (std::size_t l : cfg.sweep.l) {
    for (double t : cfg.sweep.t) {
      const std::string ls = std::to_string(l), ts = format_number(t);
      std::vector<double> adv, tr, te, tpe;
      try {
        SbfmConfig sc = cfg.sbfm;
        sc.layers = l;
        sc.threshold = t;
        for (std::uint64_t seed : cfg.seeds) {
          auto m = train_model(cfg, data, sc, seed, &log, "l=" + ls + " t=" + ts + " seed" + std::to_string(seed));
          adv.push_back(attack_sweep(m.model, data.test, eps).records[0].accuracy);
          tr.push_back(m.report.final_train_accuracy());
          te.push_back(m.report.test_accuracy);
          tpe.push_back(m.report.mean_epoch_seconds());
        }
      } catch (const std::exception& e) {
        any_failed = true;
        err << "sweep cell l=" << ls << " t=" << ts << " failed: " << e.what() << "\n";
        grid.add_row({ls, ts, "FAILED", std::to_string(cfg.seeds.size()), "", "", "", "", "", "", e.what()});
        timing.add_row({ls, ts, "FAILED", "", ""});
        continue;
      }
      const auto a = mean_std(adv), b = mean_std(tr), c = mean_std(te), d = mean_std(tpe);
      grid.add_row({ls, ts, "OK", std::to_string(cfg.seeds.size()), format_number(a.mean), format_number(a.std),
                    format_number(b.mean), format_number(b.std), format_number(c.mean), format_number(c.std), ""});
      timing.add_row({ls, ts, "OK", format_number(d.mean), format_number(d.std)});
    }
  }
  persist_stats(cfg, data);
  write_file_atomic(cfg.out / "grid.csv", grid.str());
  write_file_atomic(cfg.out / "grid_timing.csv", timing.str());
  return any_failed ? kExitFailure : kExitOk;
}

}  // namespace sbfm::harness
