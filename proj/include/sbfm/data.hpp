#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbfm/errors.hpp"
#include "sbfm/random.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

// Images [N, C, H, W] in [0, 1] with integer labels in [0, K).
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t channels() const { return images.shape.at(1); }
  std::size_t height() const { return images.shape.at(2); }
  std::size_t width() const { return images.shape.at(3); }

  void validate() const {
    if (images.rank() != 4) throw IngestError("dataset: images must be [N,C,H,W]");
    if (images.shape[0] != labels.size()) {
      throw IngestError("dataset: " + std::to_string(images.shape[0]) + " images but " +
                        std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= class_names.size()) {
        throw IngestError("dataset: label " + std::to_string(l) + " outside class range");
      }
    }
    for (double v : images.values) {
      if (!(v >= 0.0 && v <= 1.0)) throw IngestError("dataset: pixel outside [0,1]");
    }
  }

  LabeledDataset subset(std::span<const std::size_t> rows) const {
    LabeledDataset out{gather_rows(images, rows), {}, class_names};
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(labels.at(r));
    return out;
  }
};

inline const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names{"airplane", "automobile", "bird",  "cat",  "deer",
                                              "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

// One CIFAR-10 binary batch: 3073-byte records, label byte then R, G, B planes.
inline LabeledDataset load_cifar10_batch(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestError("cifar10: cannot open " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecord;
    throw IngestError("cifar10: " + file.string() + ": truncated record at offset " +
                      std::to_string(offset) + " (file size " + std::to_string(bytes.size()) +
                      ")");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  LabeledDataset ds{Tensor(Shape{n, 3, kCifarSide, kCifarSide}), std::vector<int>(n),
                    cifar10_class_names()};
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw IngestError("cifar10: " + file.string() + ": label byte " + std::to_string(rec[0]) +
                        " at offset " + std::to_string(r * kCifarRecord));
    }
    ds.labels[r] = rec[0];
    double* dst = ds.images.values.data() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = rec[1 + i] / 255.0;
  }
  return ds;
}

inline LabeledDataset concat_datasets(const std::vector<LabeledDataset>& parts) {
  if (parts.empty()) throw IngestError("concat_datasets: nothing to concatenate");
  LabeledDataset out{Tensor{}, {}, parts[0].class_names};
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape s = parts[0].images.shape;
  s[0] = n;
  out.images = Tensor(s);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    if (!std::equal(p.images.shape.begin() + 1, p.images.shape.end(), s.begin() + 1, s.end())) {
      throw IngestError("concat_datasets: image shapes differ");
    }
    std::copy(p.images.values.begin(), p.images.values.end(),
              out.images.values.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

// Keeps the first `cap` samples of each class, in record order. cap == 0 keeps all.
inline LabeledDataset cap_per_class(const LabeledDataset& ds, std::size_t cap) {
  if (cap == 0) return ds;
  std::vector<std::size_t> kept_count(ds.num_classes(), 0);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& c = kept_count[static_cast<std::size_t>(ds.labels[i])];
    if (c < cap) {
      ++c;
      rows.push_back(i);
    }
  }
  return ds.subset(rows);
}

struct CifarSplits {
  LabeledDataset train;
  LabeledDataset test;
};

// data_batch_1..5.bin and test_batch.bin from the canonical binary distribution.
inline CifarSplits load_cifar10(const std::filesystem::path& dir, std::size_t train_cap_per_class = 0,
                                std::size_t test_cap_per_class = 0) {
  std::vector<LabeledDataset> parts;
  for (int i = 1; i <= 5; ++i) {
    parts.push_back(load_cifar10_batch(dir / ("data_batch_" + std::to_string(i) + ".bin")));
  }
  CifarSplits out{concat_datasets(parts), load_cifar10_batch(dir / "test_batch.bin")};
  out.train = cap_per_class(out.train, train_cap_per_class);
  out.test = cap_per_class(out.test, test_cap_per_class);
  return out;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::filesystem::path& file,
                               std::size_t offset) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw IngestError("idx: " + file.string() + ": truncated header at offset " +
                      std::to_string(offset));
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// IDX (MNIST-style) image + label files -> [N, 1, rows, cols].
inline LabeledDataset load_idx(const std::filesystem::path& images_file,
                               const std::filesystem::path& labels_file) {
  std::ifstream img(images_file, std::ios::binary);
  if (!img) throw IngestError("idx: cannot open " + images_file.string());
  std::ifstream lab(labels_file, std::ios::binary);
  if (!lab) throw IngestError("idx: cannot open " + labels_file.string());

  if (detail::read_be32(img, images_file, 0) != kIdxImagesMagic) {
    throw IngestError("idx: " + images_file.string() + ": bad magic at offset 0");
  }
  const std::size_t n = detail::read_be32(img, images_file, 4);
  const std::size_t rows = detail::read_be32(img, images_file, 8);
  const std::size_t cols = detail::read_be32(img, images_file, 12);
  if (detail::read_be32(lab, labels_file, 0) != kIdxLabelsMagic) {
    throw IngestError("idx: " + labels_file.string() + ": bad magic at offset 0");
  }
  const std::size_t nl = detail::read_be32(lab, labels_file, 4);
  if (nl != n) {
    throw IngestError("idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  std::vector<unsigned char> pixels(n * rows * cols), tags(n);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw IngestError("idx: " + images_file.string() + ": truncated pixel data at offset " +
                      std::to_string(16 + img.gcount()));
  }
  if (!lab.read(reinterpret_cast<char*>(tags.data()), static_cast<std::streamsize>(tags.size()))) {
    throw IngestError("idx: " + labels_file.string() + ": truncated labels at offset " +
                      std::to_string(8 + lab.gcount()));
  }
  const int max_label = n == 0 ? 0 : *std::max_element(tags.begin(), tags.end());
  LabeledDataset ds{Tensor(Shape{n, 1, rows, cols}), std::vector<int>(n), {}};
  for (int c = 0; c <= std::max(max_label, 9); ++c) ds.class_names.push_back(std::to_string(c));
  for (std::size_t i = 0; i < pixels.size(); ++i) ds.images.values[i] = pixels[i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = tags[i];
  return ds;
}

struct SplitSpec {
  double val_fraction = 0.10;
  std::uint64_t seed = 0;
  bool stratified = true;
};

// Per class, round(val_fraction * n_c) samples (chosen by a seeded shuffle)
// go to validation. Both outputs keep the original record order.
inline std::pair<LabeledDataset, LabeledDataset> stratified_split(const LabeledDataset& ds,
                                                                  const SplitSpec& spec) {
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0)) {
    throw ConfigError("split: val_fraction must lie in (0,1)");
  }
  const auto min_count = static_cast<std::size_t>(std::ceil(1.0 / spec.val_fraction - 1e-9));
  std::vector<std::vector<std::size_t>> groups(spec.stratified ? ds.num_classes() : 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    groups[spec.stratified ? static_cast<std::size_t>(ds.labels[i]) : 0].push_back(i);
  }
  std::vector<bool> to_val(ds.size(), false);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& idx = groups[g];
    if (idx.empty()) continue;
    if (idx.size() < min_count) {
      throw ConfigError("split: class " + std::to_string(g) + " has " + std::to_string(idx.size()) +
                        " samples, needs at least " + std::to_string(min_count));
    }
    Rng rng(derive_seed(spec.seed, g));
    rng.shuffle(idx.begin(), idx.end());
    const auto n_val = static_cast<std::size_t>(
        std::llround(spec.val_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_val; ++i) to_val[idx[i]] = true;
  }
  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t i = 0; i < ds.size(); ++i) (to_val[i] ? val_rows : train_rows).push_back(i);
  return {ds.subset(train_rows), ds.subset(val_rows)};
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  static ChannelStats identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }

  void validate() const {
    if (mean.size() != std.size()) throw ConfigError("normalize: mean/std length mismatch");
    for (double s : std) {
      if (!(s > 0.0)) throw ConfigError("normalize: std must be positive");
    }
  }
};

// Per-channel population mean and standard deviation over a dataset.
inline ChannelStats compute_channel_stats(const LabeledDataset& ds) {
  const std::size_t C = ds.channels(), plane = ds.height() * ds.width();
  ChannelStats st{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  const double count = static_cast<double>(ds.size() * plane);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < ds.size(); ++n) {
      const double* p = ds.images.values.data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    const double mean = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < ds.size(); ++n) {
      const double* p = ds.images.values.data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mean) * (p[i] - mean);
    }
    st.mean[c] = mean;
    st.std[c] = std::sqrt(v / count);
    // A constant channel keeps unit scale.
    if (!(st.std[c] > 1e-12)) st.std[c] = 1.0;
  }
  return st;
}

// (x - mean[c]) / std[c] over [N, C, H, W].
inline Tensor normalize(const Tensor& images, const ChannelStats& stats) {
  stats.validate();
  require_rank(images, 4, "normalize");
  const std::size_t C = images.shape[1], plane = images.shape[2] * images.shape[3];
  if (stats.mean.size() != C) throw DimensionError("normalize: channel count mismatch");
  Tensor out(images.shape);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t c = (i / plane) % C;
    out.values[i] = (images.values[i] - stats.mean[c]) / stats.std[c];
  }
  return out;
}

inline Tensor denormalize(const Tensor& normalized, const ChannelStats& stats) {
  stats.validate();
  require_rank(normalized, 4, "denormalize");
  const std::size_t C = normalized.shape[1], plane = normalized.shape[2] * normalized.shape[3];
  if (stats.mean.size() != C) throw DimensionError("denormalize: channel count mismatch");
  Tensor out(normalized.shape);
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const std::size_t c = (i / plane) % C;
    out.values[i] = normalized.values[i] * stats.std[c] + stats.mean[c];
  }
  return out;
}

inline void save_stats_sidecar(const std::filesystem::path& file, const ChannelStats& st) {
  nlohmann::json j{{"mean", st.mean}, {"std", st.std}};
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IngestError("stats sidecar: cannot write " + tmp);
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, file);
}

inline ChannelStats load_stats_sidecar(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IngestError("stats sidecar: cannot open " + file.string());
  try {
    const auto j = nlohmann::json::parse(in);
    ChannelStats st{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    st.validate();
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("stats sidecar: " + file.string() + ": " + e.what());
  }
}

// Reads the sidecar when present, otherwise computes from `train` and caches it.
inline ChannelStats load_or_compute_stats(const std::filesystem::path& sidecar,
                                          const LabeledDataset& train) {
  if (std::filesystem::exists(sidecar)) return load_stats_sidecar(sidecar);
  auto st = compute_channel_stats(train);
  save_stats_sidecar(sidecar, st);
  return st;
}

enum class EdgeClass : int { Horizontal = 0, Vertical = 1, PositiveDiagonal = 2, NegativeDiagonal = 3, None = 4 };

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"horizontal", "vertical", "positive_diagonal",
                                              "negative_diagonal", "none"};
  return names;
}

// Step-edge images over two flat colours, labelled by edge direction, plus
// constant images labelled "none". Labels cycle 0..4 so classes are balanced.
inline LabeledDataset synthetic_edges(std::size_t count, std::size_t size, std::uint64_t seed,
                                      std::size_t channels = 3) {
  if (size < 8) throw ConfigError("synthetic_edges: size must be >= 8");
  LabeledDataset ds{Tensor(Shape{count, channels, size, size}), std::vector<int>(count),
                    synthetic_class_names()};
  Rng rng(seed);
  const auto S = static_cast<long>(size);
  for (std::size_t n = 0; n < count; ++n) {
    const auto cls = static_cast<EdgeClass>(n % 5);
    ds.labels[n] = static_cast<int>(cls);
    std::vector<double> lo(channels), hi(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      lo[c] = rng.uniform(0.0, 0.4);
      hi[c] = lo[c] + rng.uniform(0.3, 0.6);
    }
    if (rng.uniform() < 0.5) std::swap(lo, hi);
    // Edge offset, kept away from the border.
    const long lo_off = S / 4, hi_off = (3 * S) / 4;
    const long off = lo_off + static_cast<long>(rng.below(static_cast<std::uint64_t>(hi_off - lo_off + 1)));
    for (long i = 0; i < S; ++i)
      for (long j = 0; j < S; ++j) {
        bool first = true;
        switch (cls) {
          case EdgeClass::Horizontal: first = i < off; break;
          case EdgeClass::Vertical: first = j < off; break;
          case EdgeClass::PositiveDiagonal: first = i + j < 2 * off; break;
          case EdgeClass::NegativeDiagonal: first = j - i > 2 * off - S; break;
          case EdgeClass::None: first = true; break;
        }
        for (std::size_t c = 0; c < channels; ++c) {
          ds.images.at(n, c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
              first ? lo[c] : hi[c];
        }
      }
  }
  return ds;
}

}  // namespace sbfm
