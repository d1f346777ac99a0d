#pragma once

// Low-level loops shared by the differentiable ops. Every reduction here runs
// in a fixed index order, so results do not depend on the thread count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace sbfm::kernels {

inline std::size_t& thread_setting() {
  static std::size_t n = [] {
    if (const char* env = std::getenv("SBFM_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v > 0) return static_cast<std::size_t>(v);
    }
    return static_cast<std::size_t>(std::max(1u, std::thread::hardware_concurrency()));
  }();
  return n;
}

inline std::size_t num_threads() { return thread_setting(); }
inline void set_num_threads(std::size_t n) { thread_setting() = std::max<std::size_t>(1, n); }

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
}

// C[M x N] += A[M x K] * B[K x N].
// A is addressed as A[i * a_row + k * a_col] so transposed operands need no copy.
// Each C element receives its K products in increasing k order, which makes the
// result identical to a plain sequential dot product.
inline void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A,
                     std::size_t a_row, std::size_t a_col, const double* B, std::size_t ldb,
                     double* C, std::size_t ldc) {
  constexpr std::size_t kBlockN = 512;
  for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
    const std::size_t nb = std::min(kBlockN, N - j0);
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
      double* c0 = C + (i + 0) * ldc + j0;
      double* c1 = C + (i + 1) * ldc + j0;
      double* c2 = C + (i + 2) * ldc + j0;
      double* c3 = C + (i + 3) * ldc + j0;
      for (std::size_t k = 0; k < K; ++k) {
        const double a0 = A[(i + 0) * a_row + k * a_col];
        const double a1 = A[(i + 1) * a_row + k * a_col];
        const double a2 = A[(i + 2) * a_row + k * a_col];
        const double a3 = A[(i + 3) * a_row + k * a_col];
        const double* b = B + k * ldb + j0;
        for (std::size_t j = 0; j < nb; ++j) {
          const double bv = b[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < M; ++i) {
      double* c = C + i * ldc + j0;
      for (std::size_t k = 0; k < K; ++k) {
        const double a = A[i * a_row + k * a_col];
        const double* b = B + k * ldb + j0;
        for (std::size_t j = 0; j < nb; ++j) c[j] += a * b[j];
      }
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t ksize, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * ksize * ksize; }
  std::size_t positions() const { return out_h * out_w; }
};

// col[(c, ki, kj)][(oh, ow)] = x[c][oh*stride + ki - pad][ow*stride + kj - pad], 0 outside.
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.ksize; ++ki) {
      for (std::size_t kj = 0; kj < g.ksize; ++kj) {
        double* row = col + ((c * g.ksize + ki) * g.ksize + kj) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Transposed layout: rows[(oh, ow)][(c, ki, kj)].
inline void im2row(const double* x, const ConvGeometry& g, double* rows) {
  const std::size_t K = g.patch();
  for (std::size_t oh = 0; oh < g.out_h; ++oh) {
    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
      double* dst = rows + (oh * g.out_w + ow) * K;
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.ksize; ++ki) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t kj = 0; kj < g.ksize; ++kj) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) && iw >= 0 &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            *dst++ = inside ? x[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
                                static_cast<std::size_t>(iw)]
                            : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add of a column buffer back onto the image (adjoint of im2col).
inline void col2im_acc(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.ksize; ++ki) {
      for (std::size_t kj = 0; kj < g.ksize; ++kj) {
        const double* row = col + ((c * g.ksize + ki) * g.ksize + kj) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = x + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[static_cast<std::size_t>(iw)] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace sbfm::kernels
