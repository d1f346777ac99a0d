#pragma once

// Binary checkpoint: "SBFM", u32 version, u32 header length, JSON header,
// u32 record count, then records of (u32 name length, name, u8 rank,
// u64 dims[rank], f64 values). Everything little-endian. See
// docs/checkpoint_format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbfm/data.hpp"
#include "sbfm/errors.hpp"
#include "sbfm/io.hpp"
#include "sbfm/model.hpp"
#include "sbfm/optim.hpp"
#include "sbfm/sbfm.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'B', 'F', 'M'};

struct TrainingMetadata {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  std::string name;
};

struct Checkpoint {
  FusedModel model;
  TrainingMetadata metadata;
  SgdState optimizer_state;
};

// ---- JSON mapping of the architecture configs ----

inline nlohmann::json to_json(const BackboneConfig& b) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& blk : b.blocks) blocks.push_back({blk.channels, blk.convs});
  return {{"blocks", blocks},       {"fc_widths", b.fc_widths}, {"in_channels", b.in_channels},
          {"height", b.height},     {"width", b.width},         {"classes", b.classes}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig b;
  b.blocks.clear();
  for (const auto& blk : j.at("blocks")) {
    b.blocks.push_back({blk.at(0).get<std::size_t>(), blk.at(1).get<std::size_t>()});
  }
  b.fc_widths = j.at("fc_widths").get<std::vector<std::size_t>>();
  b.in_channels = j.at("in_channels").get<std::size_t>();
  b.height = j.at("height").get<std::size_t>();
  b.width = j.at("width").get<std::size_t>();
  b.classes = j.at("classes").get<std::size_t>();
  return b;
}

inline nlohmann::json to_json(const SbfmConfig& c) {
  nlohmann::json pools = nlohmann::json::array();
  for (const auto& p : c.pooling) pools.push_back({p.window, p.stride});
  return {{"layers", c.layers},
          {"threshold", c.threshold},
          {"channels_per_direction", c.channels_per_direction},
          {"kernel_size", c.kernel_size},
          {"stride", c.stride},
          {"pooling", pools},
          {"frozen", c.frozen},
          {"init_noise", c.init_noise}};
}

inline SbfmConfig sbfm_config_from_json(const nlohmann::json& j) {
  SbfmConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.threshold = j.at("threshold").get<double>();
  c.channels_per_direction = j.at("channels_per_direction").get<std::size_t>();
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.stride = j.at("stride").get<std::size_t>();
  for (const auto& p : j.at("pooling")) {
    c.pooling.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
  }
  c.frozen = j.at("frozen").get<bool>();
  c.init_noise = j.at("init_noise").get<double>();
  return c;
}

inline nlohmann::json architecture_json(const FusedModel& m) {
  return {{"backbone", to_json(m.backbone_config)},
          {"sbfm", m.sbfm ? to_json(m.sbfm->config) : nlohmann::json(nullptr)}};
}

// ---- byte-level helpers ----

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_record(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
  const auto* bytes = reinterpret_cast<const char*>(t.values.data());
  out.append(bytes, t.values.size() * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }

  const char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError("checkpoint " + path_ + ": truncated while reading " + what +
                            " at offset " + std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(FusedModel& model, const TrainingMetadata& meta,
                                        const SgdState* state = nullptr) {
  nlohmann::json header = architecture_json(model);
  header["metadata"] = {{"epoch", meta.epoch},
                        {"seed", meta.seed},
                        {"name", meta.name},
                        {"optimizer",
                         {{"learning_rate", meta.optimizer.learning_rate},
                          {"momentum", meta.optimizer.momentum},
                          {"weight_decay", meta.optimizer.weight_decay}}}};
  const std::string text = header.dump();

  std::vector<std::pair<std::string, const Tensor*>> records;
  const auto params = model.parameters();
  for (const auto& p : params) records.emplace_back(p.name, p.tensor);
  const Tensor mean(Shape{model.normalization.mean.size()}, model.normalization.mean);
  const Tensor sd(Shape{model.normalization.std.size()}, model.normalization.std);
  records.emplace_back("normalization.mean", &mean);
  records.emplace_back("normalization.std", &sd);

  std::vector<Tensor> velocity;
  if (state && !state->velocity.empty()) {
    std::vector<const NamedTensor*> trainable;
    for (const auto& p : params)
      if (p.tensor->requires_grad) trainable.push_back(&p);
    if (trainable.size() != state->velocity.size()) {
      throw ContractError("checkpoint: optimizer state does not match trainable parameters");
    }
    velocity.reserve(trainable.size());
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      if (state->velocity[i].empty()) continue;
      velocity.emplace_back(trainable[i]->tensor->shape, state->velocity[i]);
      records.emplace_back("optimizer.velocity." + trainable[i]->name, &velocity.back());
    }
  }

  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) detail::put_record(out, name, *t);
  return out;
}

inline void save_checkpoint(FusedModel& model, const std::filesystem::path& path,
                            const TrainingMetadata& meta = {}, const SgdState* state = nullptr) {
  write_file_atomic(path, serialize_checkpoint(model, meta, state));
}

// Rebuilds the architecture from the header, then overwrites every parameter.
// Any magic/version/shape/name mismatch or truncation throws CheckpointError.
inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (std::memcmp(r.take(4, "magic"), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("checkpoint " + path + ": bad magic (not an SBFM checkpoint)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + path + ": unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.get<std::uint32_t>("header length");
  const std::string text(r.take(header_len, "header"), header_len);

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    const BackboneConfig backbone = backbone_from_json(header.at("backbone"));
    std::optional<SbfmConfig> sbfm_cfg;
    if (!header.at("sbfm").is_null()) sbfm_cfg = sbfm_config_from_json(header.at("sbfm"));
    ck.model = build_model(backbone, sbfm_cfg, 0);
    const auto& meta = header.at("metadata");
    ck.metadata.epoch = meta.at("epoch").get<std::size_t>();
    ck.metadata.seed = meta.at("seed").get<std::uint64_t>();
    ck.metadata.name = meta.at("name").get<std::string>();
    ck.metadata.optimizer.learning_rate = meta.at("optimizer").at("learning_rate").get<double>();
    ck.metadata.optimizer.momentum = meta.at("optimizer").at("momentum").get<double>();
    ck.metadata.optimizer.weight_decay = meta.at("optimizer").at("weight_decay").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint " + path + ": invalid architecture: " + e.what());
  }

  std::map<std::string, Tensor> loaded;
  const auto count = r.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("record name length");
    std::string name(r.take(name_len, "record name"), name_len);
    const auto rank = r.get<std::uint8_t>("record rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("record dims"));
    const std::size_t n = numel(shape);
    if (n > (bytes.size() - r.offset()) / sizeof(double)) {
      throw CheckpointError("checkpoint " + path + ": truncated data for '" + name + "' at offset " +
                            std::to_string(r.offset()));
    }
    Tensor t(shape);
    std::memcpy(t.values.data(), r.take(n * sizeof(double), "record data"), n * sizeof(double));
    if (!loaded.emplace(name, std::move(t)).second) {
      throw CheckpointError("checkpoint " + path + ": duplicate record '" + name + "'");
    }
  }
  if (!r.done()) {
    throw CheckpointError("checkpoint " + path + ": trailing bytes at offset " + std::to_string(r.offset()));
  }

  auto take_record = [&](const std::string& name, const Shape& expected) -> Tensor {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError("checkpoint " + path + ": missing parameter '" + name + "'");
    if (it->second.shape != expected) {
      throw CheckpointError("checkpoint " + path + ": shape mismatch for '" + name + "': stored " +
                            shape_str(it->second.shape) + ", architecture needs " + shape_str(expected));
    }
    Tensor t = std::move(it->second);
    loaded.erase(it);
    return t;
  };

  const auto params = ck.model.parameters();
  for (const auto& p : params) p.tensor->values = take_record(p.name, p.tensor->shape).values;
  const std::size_t C = ck.model.backbone_config.in_channels;
  ck.model.normalization.mean = take_record("normalization.mean", Shape{C}).values;
  ck.model.normalization.std = take_record("normalization.std", Shape{C}).values;

  bool any_velocity = false;
  for (const auto& p : params) {
    if (p.tensor->requires_grad) any_velocity |= loaded.count("optimizer.velocity." + p.name) > 0;
  }
  if (any_velocity) {
    for (const auto& p : params) {
      if (!p.tensor->requires_grad) continue;
      auto it = loaded.find("optimizer.velocity." + p.name);
      ck.optimizer_state.velocity.push_back(
          it == loaded.end() ? std::vector<double>{} : take_record(it->first, p.tensor->shape).values);
    }
  }
  if (!loaded.empty()) {
    throw CheckpointError("checkpoint " + path + ": unexpected record '" + loaded.begin()->first + "'");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

}  // namespace sbfm
