// sbfm train|attack|sweep --config PATH [overrides]

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sbfm/errors.hpp"
#include "sbfm/harness/commands.hpp"
#include "sbfm/harness/config.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string out;
  std::string seeds;
  std::string epsilons;
  std::size_t subset_per_class = 0;
  bool subset_given = false;
  bool freeze_sbfm = false;
  std::vector<std::string> checkpoints;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration file (key = value)")->required();
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--seed", o.seeds, "Seed list, e.g. 1,2,3");
  cmd->add_option("--epsilons", o.epsilons, "Epsilon list, e.g. 0.1/255,8/255");
  cmd->add_option_function<std::size_t>(
      "--subset-per-class",
      [&o](std::size_t n) {
        o.subset_per_class = n;
        o.subset_given = true;
      },
      "Cap on training images per class");
  cmd->add_flag("--freeze-sbfm", o.freeze_sbfm, "Keep the SBFM kernels at their initial values");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace sbfm::harness;
  CLI::App app{"Sobel binary feature module experiments"};
  app.require_subcommand(1);
  Overrides o;
  auto* train = app.add_subcommand("train", "Train baseline and/or fused models for each seed");
  auto* attack = app.add_subcommand("attack", "FGSM accuracy-vs-epsilon curves for checkpoints");
  auto* sweep = app.add_subcommand("sweep", "Train and attack one fused model per (l, t) cell");
  for (auto* cmd : {train, attack, sweep}) add_common(cmd, o);
  attack->add_option("--checkpoint,checkpoints", o.checkpoints, "Checkpoint files to evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  RunConfig cfg;
  try {
    cfg = load_config(o.config);
    if (!o.out.empty()) cfg.out = o.out;
    if (!o.seeds.empty()) cfg.seeds = parse_seed_list(o.seeds);
    if (!o.epsilons.empty()) cfg.epsilons = parse_epsilon_list(o.epsilons);
    if (o.subset_given) cfg.subset_per_class = o.subset_per_class;
    if (o.freeze_sbfm) cfg.sbfm.frozen = true;
    if (!o.checkpoints.empty()) cfg.checkpoints.assign(o.checkpoints.begin(), o.checkpoints.end());
  } catch (const sbfm::IngestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const sbfm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }

  try {
    if (*train) return cmd_train(cfg, std::cerr, std::cerr);
    if (*attack) return cmd_attack(cfg, std::cerr, std::cerr);
    return cmd_sweep(cfg, std::cerr, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
