#pragma once

// Run configuration: one `key = value` per line, `#` starts a comment, list
// values are comma separated. Unknown keys are rejected. See README.md for
// the key reference.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sbfm/attack.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/model.hpp"
#include "sbfm/optim.hpp"
#include "sbfm/sbfm.hpp"

namespace sbfm::harness {

struct SweepGrid {
  std::vector<std::size_t> l{1, 2, 3};
  std::vector<double> t{0.4, 0.6, 0.8};

  void validate() const {
    if (l.empty() || t.empty()) throw ConfigError("sweep: grid must be nonempty");
    for (double v : t) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep: t values must lie in [0,1]");
    }
  }
};

struct RunConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10 | idx
  std::filesystem::path data_dir;
  std::filesystem::path idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;

  std::size_t synthetic_train = 500;
  std::size_t synthetic_test = 250;
  std::size_t synthetic_size = 16;
  std::uint64_t synthetic_seed = 0;

  std::size_t subset_per_class = 0;
  std::size_t test_subset_per_class = 0;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;

  std::vector<ConvBlock> blocks = BackboneConfig{}.blocks;
  std::vector<std::size_t> fc_widths = BackboneConfig{}.fc_widths;
  std::vector<std::string> models{"baseline", "fused"};
  SbfmConfig sbfm;

  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::size_t lr_step_epochs = 0;
  double lr_gamma = 0.1;

  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> epsilons = default_epsilons();
  SweepGrid sweep;
  double sweep_epsilon = 8.0 / 255.0;

  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path out = "runs/out";
  std::filesystem::path normalization_cache;  // empty: <out>/normalization.json

  std::filesystem::path stats_path() const {
    return normalization_cache.empty() ? out / "normalization.json" : normalization_cache;
  }

  void validate() const {
    if (dataset != "synthetic" && dataset != "cifar10" && dataset != "idx") {
      throw ConfigError("config: unknown dataset '" + dataset + "'");
    }
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (epochs == 0 || batch_size == 0) throw ConfigError("config: epochs and batch_size must be positive");
    if (models.empty()) throw ConfigError("config: models must be nonempty");
    for (const auto& m : models) {
      if (m != "baseline" && m != "fused") throw ConfigError("config: unknown model '" + m + "'");
    }
    for (double e : epsilons) {
      if (!(e >= 0.0)) throw ConfigError("config: epsilons must be nonnegative");
    }
    if (!(sweep_epsilon >= 0.0)) throw ConfigError("config: sweep.epsilon must be nonnegative");
    optimizer.validate();
    sbfm.validate();
    sweep.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    auto item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + ": '" + v + "' is not a number");
  }
  return out;
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + ": '" + v + "' is not a nonnegative integer");
  }
  return out;
}

inline bool parse_bool(const std::string& key, std::string v) {
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: " + key + ": '" + v + "' is not a boolean");
}

}  // namespace detail

// "8/255" or a plain decimal.
inline double parse_epsilon(const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos) return detail::parse_double("epsilon", detail::trim(text));
  const double num = detail::parse_double("epsilon", detail::trim(text.substr(0, slash)));
  const double den = detail::parse_double("epsilon", detail::trim(text.substr(slash + 1)));
  if (!(den > 0.0)) throw ConfigError("config: epsilon denominator must be positive");
  return num / den;
}

inline std::vector<double> parse_epsilon_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : detail::split_list(text)) out.push_back(parse_epsilon(item));
  if (out.empty()) throw ConfigError("config: empty epsilon list");
  return out;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : detail::split_list(text)) out.push_back(detail::parse_unsigned<std::uint64_t>("seeds", item));
  if (out.empty()) throw ConfigError("config: empty seed list");
  return out;
}

// Applies one key. Shared by the file parser and command-line overrides.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::split_list;
  auto size = [&](const std::string& s) { return detail::parse_unsigned<std::size_t>(key, s); };
  auto u64 = [&](const std::string& s) { return detail::parse_unsigned<std::uint64_t>(key, s); };

  if (key == "dataset") c.dataset = v;
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "idx.train_images") c.idx_train_images = v;
  else if (key == "idx.train_labels") c.idx_train_labels = v;
  else if (key == "idx.test_images") c.idx_test_images = v;
  else if (key == "idx.test_labels") c.idx_test_labels = v;
  else if (key == "synthetic.train") c.synthetic_train = size(v);
  else if (key == "synthetic.test") c.synthetic_test = size(v);
  else if (key == "synthetic.size") c.synthetic_size = size(v);
  else if (key == "synthetic.seed") c.synthetic_seed = u64(v);
  else if (key == "subset_per_class") c.subset_per_class = size(v);
  else if (key == "test_subset_per_class") c.test_subset_per_class = size(v);
  else if (key == "val_fraction") c.val_fraction = parse_double(key, v);
  else if (key == "split_seed") c.split_seed = u64(v);
  else if (key == "backbone.blocks") {
    c.blocks.clear();
    for (const auto& item : split_list(v)) {
      const auto x = item.find('x');
      if (x == std::string::npos) throw ConfigError("config: backbone.blocks entries look like 32x2, got '" + item + "'");
      c.blocks.push_back({size(detail::trim(item.substr(0, x))), size(detail::trim(item.substr(x + 1)))});
    }
  } else if (key == "backbone.fc") {
    c.fc_widths.clear();
    for (const auto& item : split_list(v)) c.fc_widths.push_back(size(item));
  } else if (key == "models") c.models = split_list(v);
  else if (key == "sbfm.layers") c.sbfm.layers = size(v);
  else if (key == "sbfm.threshold") c.sbfm.threshold = parse_double(key, v);
  else if (key == "sbfm.channels_per_direction") c.sbfm.channels_per_direction = size(v);
  else if (key == "sbfm.kernel_size") c.sbfm.kernel_size = size(v);
  else if (key == "sbfm.stride") c.sbfm.stride = size(v);
  else if (key == "sbfm.frozen") c.sbfm.frozen = parse_bool(key, v);
  else if (key == "sbfm.init_noise") c.sbfm.init_noise = parse_double(key, v);
  else if (key == "sbfm.pooling") {
    c.sbfm.pooling.clear();
    for (const auto& item : split_list(v)) {
      if (item == "none") {
        c.sbfm.pooling.push_back({0, 0});
        continue;
      }
      const auto slash = item.find('/');
      if (slash == std::string::npos) throw ConfigError("config: sbfm.pooling entries look like 2/2 or none");
      c.sbfm.pooling.push_back({size(detail::trim(item.substr(0, slash))), size(detail::trim(item.substr(slash + 1)))});
    }
  } else if (key == "lr") c.optimizer.learning_rate = parse_double(key, v);
  else if (key == "momentum") c.optimizer.momentum = parse_double(key, v);
  else if (key == "weight_decay") c.optimizer.weight_decay = parse_double(key, v);
  else if (key == "epochs") c.epochs = size(v);
  else if (key == "batch_size") c.batch_size = size(v);
  else if (key == "lr_step_epochs") c.lr_step_epochs = size(v);
  else if (key == "lr_gamma") c.lr_gamma = parse_double(key, v);
  else if (key == "seeds") c.seeds = parse_seed_list(v);
  else if (key == "epsilons") c.epsilons = parse_epsilon_list(v);
  else if (key == "sweep.l") {
    c.sweep.l.clear();
    for (const auto& item : split_list(v)) c.sweep.l.push_back(size(item));
  } else if (key == "sweep.t") {
    c.sweep.t.clear();
    for (const auto& item : split_list(v)) c.sweep.t.push_back(parse_double(key, item));
  } else if (key == "sweep.epsilon") c.sweep_epsilon = parse_epsilon(v);
  else if (key == "checkpoints") {
    c.checkpoints.clear();
    for (const auto& item : split_list(v)) c.checkpoints.emplace_back(item);
  } else if (key == "out") c.out = v;
  else if (key == "normalization_cache") c.normalization_cache = v;
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config(std::string_view text, const std::string& origin = "<string>") {
  RunConfig c;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string trimmed = detail::trim(line);
    if (!trimmed.empty()) {
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      try {
        apply_setting(c, detail::trim(trimmed.substr(0, eq)), detail::trim(trimmed.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace sbfm::harness
