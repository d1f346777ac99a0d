#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sbfm/errors.hpp"
#include "sbfm/kernels.hpp"
#include "sbfm/tape.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding.
// input [B, C, H, W], kernel [F, C, K, K] -> [B, F, H', W'].
inline Var conv2d(Var input, Var kernel, std::size_t stride = 1, std::size_t padding = 0) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (w.shape[1] != x.shape[1]) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(w.shape[1]) +
                         " channels, input has " + std::to_string(x.shape[1]));
  }
  if (w.shape[2] != w.shape[3]) throw DimensionError("conv2d: kernel must be square");
  const std::size_t B = x.shape[0], F = w.shape[0], K = w.shape[2];
  if (K > x.shape[2] + 2 * padding || K > x.shape[3] + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape) + " larger than padded input " +
                         shape_str(x.shape));
  }
  const kernels::ConvGeometry g{x.shape[1],
                                x.shape[2],
                                x.shape[3],
                                K,
                                stride,
                                padding,
                                detail::conv_out_extent(x.shape[2], K, stride, padding),
                                detail::conv_out_extent(x.shape[3], K, stride, padding)};
  const std::size_t P = g.positions(), KK = g.patch();
  const std::size_t in_item = g.channels * g.height * g.width;

  Tensor out(Shape{B, F, g.out_h, g.out_w});
  kernels::parallel_for(B, [&](std::size_t b) {
    std::vector<double> col(KK * P);
    kernels::im2col(x.values.data() + b * in_item, g, col.data());
    kernels::gemm_acc(F, P, KK, w.values.data(), KK, 1, col.data(), P,
                      out.values.data() + b * F * P, P);
  });

  return input.tape().record(
      std::move(out), {input, kernel}, [in_id = input.id(), k_id = kernel.id(), g, B, F](
                                           Tape& tape, std::size_t self) {
        const Tensor& x = tape.value(in_id);
        const Tensor& w = tape.value(k_id);
        const auto dy = tape.grad(self);
        const std::size_t P = g.positions(), KK = g.patch();
        const std::size_t in_item = g.channels * g.height * g.width;

        if (tape.requires_grad(in_id)) {
          auto dx = tape.accumulator(in_id);
          kernels::parallel_for(B, [&](std::size_t b) {
            std::vector<double> dcol(KK * P, 0.0);
            // dcol = W^T dy_b
            kernels::gemm_acc(KK, P, F, w.values.data(), 1, KK, dy.data() + b * F * P, P,
                              dcol.data(), P);
            kernels::col2im_acc(dcol.data(), g, dx.data() + b * in_item);
          });
        }
        if (tape.requires_grad(k_id)) {
          auto dw = tape.accumulator(k_id);
          // Per-item partials summed in item order keep the result independent
          // of how items are spread over threads.
          const std::size_t wave = std::max<std::size_t>(1, kernels::num_threads());
          std::vector<std::vector<double>> partial(std::min(wave, B),
                                                   std::vector<double>(F * KK));
          for (std::size_t b0 = 0; b0 < B; b0 += wave) {
            const std::size_t n = std::min(wave, B - b0);
            kernels::parallel_for(n, [&](std::size_t i) {
              std::vector<double> rows(P * KK);
              kernels::im2row(x.values.data() + (b0 + i) * in_item, g, rows.data());
              std::fill(partial[i].begin(), partial[i].end(), 0.0);
              kernels::gemm_acc(F, KK, P, dy.data() + (b0 + i) * F * P, P, 1, rows.data(), KK,
                                partial[i].data(), KK);
            });
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t k = 0; k < dw.size(); ++k) dw[k] += partial[i][k];
            }
          }
        }
      });
}

// Adds bias[c] to every element of channel c. Works on [B, C] and [B, C, H, W].
inline Var add_channel_bias(Var input, Var bias) {
  const Tensor& x = input.value();
  const Tensor& b = bias.value();
  if (x.rank() < 2 || b.rank() != 1 || b.shape[0] != x.shape[1]) {
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape) + " vs input " +
                         shape_str(x.shape));
  }
  const std::size_t N = x.shape[0], C = x.shape[1], inner = x.size() / (N * C);
  Tensor out = Tensor(x.shape, x.values);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.values.data() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b.values[c];
    }
  return input.tape().record(std::move(out), {input, bias},
                             [x_id = input.id(), b_id = bias.id(), N, C, inner](Tape& tape,
                                                                                 std::size_t self) {
                               const auto dy = tape.grad(self);
                               if (tape.requires_grad(x_id)) {
                                 auto dx = tape.accumulator(x_id);
                                 for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
                               }
                               if (tape.requires_grad(b_id)) {
                                 auto db = tape.accumulator(b_id);
                                 for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t c = 0; c < C; ++c) {
                                     const double* p = dy.data() + (n * C + c) * inner;
                                     double s = 0.0;
                                     for (std::size_t i = 0; i < inner; ++i) s += p[i];
                                     db[c] += s;
                                   }
                               }
                             });
}

// Max over window x window patches. Ties resolve to the first element in
// row-major scan order, in both the forward value and the gradient route.
inline Var maxpool2d(Var input, std::size_t window, std::size_t stride) {
  const Tensor& x = input.value();
  require_rank(x, 4, "maxpool2d");
  if (window == 0 || stride == 0) throw ConfigError("maxpool2d: window and stride must be positive");
  const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (window > H || window > W) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) +
                         " exceeds spatial extent " + shape_str(x.shape));
  }
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  Tensor out(Shape{B, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.values.data() + bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (oh * stride) * W + ow * stride;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (oh * stride + i) * W + ow * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (bc * Ho + oh) * Wo + ow;
        out.values[o] = src[best];
        argmax[o] = bc * H * W + best;
      }
  }
  return input.tape().record(std::move(out), {input},
                             [x_id = input.id(), argmax = std::move(argmax)](Tape& tape,
                                                                             std::size_t self) {
                               const auto dy = tape.grad(self);
                               auto dx = tape.accumulator(x_id);
                               for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
                             });
}

// Pads H and W by `pad` on each side, repeating the nearest border pixel.
inline Var replicate_pad(Var input, std::size_t pad) {
  const Tensor& x = input.value();
  require_rank(x, 4, "replicate_pad");
  const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (pad == 0) return input;
  if (H == 0 || W == 0) throw DimensionError("replicate_pad: empty spatial extent");
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  // Source index of each padded position within one plane.
  std::vector<std::size_t> src(Hp * Wp);
  for (std::size_t i = 0; i < Hp; ++i) {
    const std::size_t si = std::min(i < pad ? 0 : i - pad, H - 1);
    for (std::size_t j = 0; j < Wp; ++j) {
      const std::size_t sj = std::min(j < pad ? 0 : j - pad, W - 1);
      src[i * Wp + j] = si * W + sj;
    }
  }
  Tensor out(Shape{B, C, Hp, Wp});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* in = x.values.data() + bc * H * W;
    double* o = out.values.data() + bc * Hp * Wp;
    for (std::size_t k = 0; k < src.size(); ++k) o[k] = in[src[k]];
  }
  return input.tape().record(
      std::move(out), {input},
      [x_id = input.id(), src = std::move(src), planes = B * C, in_plane = H * W](Tape& tape, std::size_t self) {
        const auto dy = tape.grad(self);
        auto dx = tape.accumulator(x_id);
        for (std::size_t bc = 0; bc < planes; ++bc)
          for (std::size_t k = 0; k < src.size(); ++k) dx[bc * in_plane + src[k]] += dy[bc * src.size() + k];
      });
}

// Subgradient at 0 is 0.
inline Var relu(Var input) {
  const Tensor& x = input.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] > 0.0 ? x.values[i] : 0.0;
  return input.tape().record(std::move(out), {input}, [x_id = input.id()](Tape& tape,
                                                                           std::size_t self) {
    const Tensor& x = tape.value(x_id);
    const auto dy = tape.grad(self);
    auto dx = tape.accumulator(x_id);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (x.values[i] > 0.0) dx[i] += dy[i];
  });
}

// |x| with derivative sign(x), sign(0) = 0.
inline Var absolute(Var input) {
  const Tensor& x = input.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = std::abs(x.values[i]);
  return input.tape().record(std::move(out), {input}, [x_id = input.id()](Tape& tape,
                                                                           std::size_t self) {
    const Tensor& x = tape.value(x_id);
    const auto dy = tape.grad(self);
    auto dx = tape.accumulator(x_id);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (x.values[i] > 0.0) dx[i] += dy[i];
      else if (x.values[i] < 0.0) dx[i] -= dy[i];
    }
  });
}

// input [B, D] @ weight [D, M] + bias [M] -> [B, M].
inline Var linear(Var input, Var weight, Var bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  require_rank(b, 1, "linear bias");
  const std::size_t B = x.shape[0], D = x.shape[1], M = w.shape[1];
  if (w.shape[0] != D || b.shape[0] != M) {
    throw DimensionError("linear: input " + shape_str(x.shape) + ", weight " + shape_str(w.shape) +
                         ", bias " + shape_str(b.shape));
  }
  Tensor out(Shape{B, M});
  kernels::gemm_acc(B, M, D, x.values.data(), D, 1, w.values.data(), M, out.values.data(), M);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t m = 0; m < M; ++m) out.values[n * M + m] += b.values[m];

  return input.tape().record(
      std::move(out), {input, weight, bias},
      [x_id = input.id(), w_id = weight.id(), b_id = bias.id(), B, D, M](Tape& tape,
                                                                         std::size_t self) {
        const auto dy = tape.grad(self);
        if (tape.requires_grad(x_id)) {
          const Tensor& w = tape.value(w_id);
          auto dx = tape.accumulator(x_id);
          // dx = dy W^T
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t d = 0; d < D; ++d) {
              const double* wr = w.values.data() + d * M;
              const double* g = dy.data() + n * M;
              double s = 0.0;
              for (std::size_t m = 0; m < M; ++m) s += g[m] * wr[m];
              dx[n * D + d] += s;
            }
        }
        if (tape.requires_grad(w_id)) {
          const Tensor& x = tape.value(x_id);
          auto dw = tape.accumulator(w_id);
          // dW = x^T dy
          kernels::gemm_acc(D, M, B, x.values.data(), 1, D, dy.data(), M, dw.data(), M);
        }
        if (tape.requires_grad(b_id)) {
          auto db = tape.accumulator(b_id);
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t m = 0; m < M; ++m) db[m] += dy[n * M + m];
        }
      });
}

// [B, Da] ++ [B, Db] -> [B, Da + Db].
inline Var concat(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank(x, 2, "concat lhs");
  require_rank(y, 2, "concat rhs");
  if (x.shape[0] != y.shape[0]) {
    throw DimensionError("concat: batch sizes differ " + shape_str(x.shape) + " vs " +
                         shape_str(y.shape));
  }
  const std::size_t B = x.shape[0], Da = x.shape[1], Db = y.shape[1];
  Tensor out(Shape{B, Da + Db});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(n * Da), Da,
                out.values.begin() + static_cast<std::ptrdiff_t>(n * (Da + Db)));
    std::copy_n(y.values.begin() + static_cast<std::ptrdiff_t>(n * Db), Db,
                out.values.begin() + static_cast<std::ptrdiff_t>(n * (Da + Db) + Da));
  }
  return a.tape().record(std::move(out), {a, b},
                         [a_id = a.id(), b_id = b.id(), B, Da, Db](Tape& tape, std::size_t self) {
                           const auto dy = tape.grad(self);
                           if (tape.requires_grad(a_id)) {
                             auto da = tape.accumulator(a_id);
                             for (std::size_t n = 0; n < B; ++n)
                               for (std::size_t i = 0; i < Da; ++i)
                                 da[n * Da + i] += dy[n * (Da + Db) + i];
                           }
                           if (tape.requires_grad(b_id)) {
                             auto db = tape.accumulator(b_id);
                             for (std::size_t n = 0; n < B; ++n)
                               for (std::size_t i = 0; i < Db; ++i)
                                 db[n * Db + i] += dy[n * (Da + Db) + Da + i];
                           }
                         });
}

// [B, ...] -> [B, prod(...)].
inline Var flatten(Var input) {
  const Tensor& x = input.value();
  if (x.rank() < 1) throw DimensionError("flatten: scalar input");
  const std::size_t B = x.shape[0];
  Tensor out(Shape{B, B == 0 ? 0 : x.size() / B}, x.values);
  return input.tape().record(std::move(out), {input}, [x_id = input.id()](Tape& tape,
                                                                           std::size_t self) {
    const auto dy = tape.grad(self);
    auto dx = tape.accumulator(x_id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.value().shape, a.value().values);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += b.value().values[i];
  return a.tape().record(std::move(out), {a, b},
                         [a_id = a.id(), b_id = b.id()](Tape& tape, std::size_t self) {
                           const auto dy = tape.grad(self);
                           for (std::size_t id : {a_id, b_id}) {
                             if (!tape.requires_grad(id)) continue;
                             auto d = tape.accumulator(id);
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
                           }
                         });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values[i] = a.value().values[i] * b.value().values[i];
  return a.tape().record(std::move(out), {a, b},
                         [a_id = a.id(), b_id = b.id()](Tape& tape, std::size_t self) {
                           const auto dy = tape.grad(self);
                           const Tensor& av = tape.value(a_id);
                           const Tensor& bv = tape.value(b_id);
                           if (tape.requires_grad(a_id)) {
                             auto d = tape.accumulator(a_id);
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * bv.values[i];
                           }
                           if (tape.requires_grad(b_id)) {
                             auto d = tape.accumulator(b_id);
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * av.values[i];
                           }
                         });
}

// Sum of all elements -> shape [1].
inline Var sum(Var input) {
  double s = 0.0;
  for (double v : input.value().values) s += v;
  return input.tape().record(Tensor::scalar(s), {input}, [x_id = input.id()](Tape& tape,
                                                                              std::size_t self) {
    const double g = tape.grad(self)[0];
    auto dx = tape.accumulator(x_id);
    for (double& d : dx) d += g;
  });
}

// (x - mean[c]) / std[c] per channel of [B, C, H, W].
inline Var standardize(Var input, std::span<const double> mean, std::span<const double> stddev) {
  const Tensor& x = input.value();
  require_rank(x, 4, "standardize");
  const std::size_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  if (mean.size() != C || stddev.size() != C) {
    throw DimensionError("standardize: statistics for " + std::to_string(mean.size()) +
                         " channels, input has " + std::to_string(C));
  }
  std::vector<double> inv(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (!(stddev[c] > 0.0)) throw ConfigError("standardize: std must be positive");
    inv[c] = 1.0 / stddev[c];
  }
  Tensor out(x.shape);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i)
        out.values[base + i] = (x.values[base + i] - mean[c]) / stddev[c];
    }
  return input.tape().record(std::move(out), {input},
                             [x_id = input.id(), inv = std::move(inv), B, C, HW](Tape& tape,
                                                                                 std::size_t self) {
                               const auto dy = tape.grad(self);
                               auto dx = tape.accumulator(x_id);
                               for (std::size_t n = 0; n < B; ++n)
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t base = (n * C + c) * HW;
                                   for (std::size_t i = 0; i < HW; ++i)
                                     dx[base + i] += dy[base + i] * inv[c];
                                 }
                             });
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_rank(z, 2, "softmax_cross_entropy");
  const std::size_t B = z.shape[0], K = z.shape[1];
  if (labels.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
  }
  if (B == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  std::vector<double> probs(B * K);
  double total = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                       " outside [0," + std::to_string(K) + ")");
    }
    const double* row = z.values.data() + n * K;
    const double m = *std::max_element(row, row + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    const double log_s = std::log(s);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(row[k] - m - log_s);
    total += log_s - (row[static_cast<std::size_t>(labels[n])] - m);
  }
  std::vector<int> owned(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(total / static_cast<double>(B)), {logits},
      [z_id = logits.id(), probs = std::move(probs), owned = std::move(owned), B, K](
          Tape& tape, std::size_t self) {
        const double g = tape.grad(self)[0] / static_cast<double>(B);
        auto dz = tape.accumulator(z_id);
        for (std::size_t n = 0; n < B; ++n) {
          const std::size_t y = static_cast<std::size_t>(owned[n]);
          // p_y - 1 computed as -sum(p_k, k != y) keeps confident rows from
          // cancelling to exactly zero.
          double rest = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            if (k == y) continue;
            rest += probs[n * K + k];
            dz[n * K + k] += g * probs[n * K + k];
          }
          dz[n * K + y] -= g * rest;
        }
      });
}

}  // namespace sbfm
