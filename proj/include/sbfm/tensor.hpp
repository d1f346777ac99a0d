#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sbfm/errors.hpp"

namespace sbfm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major f64 array. Feature maps are channel-major: [B, C, H, W].
// `grad` is empty until a backward pass (or the optimizer) populates it.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(numel(shape), fill) {}

  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape)) {
      throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " +
                           shape_str(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(values.size(), 0.0); }
  void clear_grad() { grad.clear(); }

  std::span<double> data() { return values; }
  std::span<const double> data() const { return values; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  // 4-D accessor for [B, C, H, W] tensors.
  double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return values[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return values[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
};

// Bitwise value equality (shape and every element's representation).
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.values[i]) != std::bit_cast<std::uint64_t>(b.values[i])) {
      return false;
    }
  }
  return true;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape));
  }
}

// Copies rows [first, first + count) along the leading axis.
inline Tensor slice_rows(const Tensor& t, std::size_t first, std::size_t count) {
  if (t.rank() == 0 || first + count > t.shape[0]) {
    throw IndexError("slice_rows: range out of bounds for shape " + shape_str(t.shape));
  }
  const std::size_t row = t.size() / t.shape[0];
  Shape s = t.shape;
  s[0] = count;
  Tensor out(s);
  std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(first * row), count * row,
              out.values.begin());
  return out;
}

// Gathers rows by index along the leading axis.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t row = t.shape.empty() || t.shape[0] == 0 ? 0 : t.size() / t.shape[0];
  Shape s = t.shape;
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.shape[0]) throw IndexError("gather_rows: row index out of range");
    std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.values.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

}  // namespace sbfm
