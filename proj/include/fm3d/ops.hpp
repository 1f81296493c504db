#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <limits>

#include "fm3d/tensor.hpp"

namespace fm3d {

using Dims3 = std::array<size_t, 3>; // (t, h, w) extents / strides / paddings

enum class Mode { train, eval };

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Geometry of one 3-D convolution / pooling, with output-extent validation.
struct ConvGeom {
  size_t N, C, T, H, W;       // input
  size_t K, kt, kh, kw;       // kernel
  size_t st, sh, sw;          // stride
  size_t pt, ph, pw;          // padding
  size_t To, Ho, Wo;          // output

  static size_t out_extent(const char* what, size_t in, size_t k, size_t s, size_t p) {
    check(s >= 1, std::string("conv3d: stride must be >= 1 in ") + what);
    long long span = static_cast<long long>(in) + 2 * static_cast<long long>(p) -
                     static_cast<long long>(k);
    check(span >= 0, std::string("conv3d: non-positive output extent in ") + what);
    return static_cast<size_t>(span) / s + 1;
  }
};

inline ConvGeom conv_geom(const Shape& in, const Shape& ker, Dims3 stride, Dims3 pad) {
  check(in.size() == 5, "conv3d: input must be N x C x T x H x W, got " + shape_str(in));
  check(ker.size() == 5, "conv3d: kernel must be K x C x kt x kh x kw, got " + shape_str(ker));
  check(in[1] == ker[1], "conv3d: input channels " + std::to_string(in[1]) +
                             " != kernel channels " + std::to_string(ker[1]));
  ConvGeom g;
  g.N = in[0];
  g.C = in[1];
  g.T = in[2];
  g.H = in[3];
  g.W = in[4];
  g.K = ker[0];
  g.kt = ker[2];
  g.kh = ker[3];
  g.kw = ker[4];
  g.st = stride[0];
  g.sh = stride[1];
  g.sw = stride[2];
  g.pt = pad[0];
  g.ph = pad[1];
  g.pw = pad[2];
  g.To = ConvGeom::out_extent("t", g.T, g.kt, g.st, g.pt);
  g.Ho = ConvGeom::out_extent("h", g.H, g.kh, g.sh, g.ph);
  g.Wo = ConvGeom::out_extent("w", g.W, g.kw, g.sw, g.pw);
  return g;
}

// Valid output range [lo, hi) for one kernel tap: positions whose input
// index o*stride + k - pad lands inside [0, extent).
inline void tap_range(size_t out_extent, size_t in_extent, size_t stride, long long off,
                      size_t& lo, size_t& hi) {
  // o*stride + off in [0, in_extent)
  long long lo_ll = off >= 0 ? 0 : (-off + static_cast<long long>(stride) - 1) /
                                       static_cast<long long>(stride);
  long long hi_ll = (static_cast<long long>(in_extent) - 1 - off) /
                    static_cast<long long>(stride);
  if (off > static_cast<long long>(in_extent) - 1) {
    lo = hi = 0;
    return;
  }
  lo = static_cast<size_t>(std::max(0LL, lo_ll));
  hi = static_cast<size_t>(std::min(static_cast<long long>(out_extent) - 1, hi_ll)) + 1;
  if (lo >= hi) lo = hi = 0;
}

// Reference forward: direct loops, per-element tap order (c, kt, kh, kw).
template <typename T>
void conv3d_forward_reference(const ConvGeom& g, const T* in, const T* ker, const T* bias,
                              T* out) {
  for (size_t n = 0; n < g.N; ++n)
    for (size_t k = 0; k < g.K; ++k)
      for (size_t to = 0; to < g.To; ++to)
        for (size_t ho = 0; ho < g.Ho; ++ho)
          for (size_t wo = 0; wo < g.Wo; ++wo) {
            T acc = bias ? bias[k] : T(0);
            for (size_t c = 0; c < g.C; ++c)
              for (size_t a = 0; a < g.kt; ++a) {
                long long t = static_cast<long long>(to * g.st + a) -
                              static_cast<long long>(g.pt);
                if (t < 0 || t >= static_cast<long long>(g.T)) continue;
                for (size_t b = 0; b < g.kh; ++b) {
                  long long h = static_cast<long long>(ho * g.sh + b) -
                                static_cast<long long>(g.ph);
                  if (h < 0 || h >= static_cast<long long>(g.H)) continue;
                  for (size_t d = 0; d < g.kw; ++d) {
                    long long w = static_cast<long long>(wo * g.sw + d) -
                                  static_cast<long long>(g.pw);
                    if (w < 0 || w >= static_cast<long long>(g.W)) continue;
                    T kv = ker[(((k * g.C + c) * g.kt + a) * g.kh + b) * g.kw + d];
                    T iv = in[(((n * g.C + c) * g.T + t) * g.H + h) * g.W + w];
                    acc = std::fma(kv, iv, acc);
                  }
                }
              }
            out[((n * g.K + k) * g.To + to) * g.Ho * g.Wo + ho * g.Wo + wo] = acc;
          }
}

// Fast forward. Same per-element accumulation order as the reference (taps
// in (c, kt, kh, kw) order, fma chain started at the bias), restructured so
// the innermost loop runs contiguously over output columns. For strided
// widths the input row is deinterleaved once per row into per-phase buffers
// so the fma loop always reads contiguous memory.
template <typename T>
void conv3d_forward_fast(const ConvGeom& g, const T* in, const T* ker, const T* bias, T* out) {
  const size_t in_row = g.W;
  const size_t out_plane = g.Ho * g.Wo;
  const size_t phase_len = g.sw > 1 ? (g.W + g.sw - 1) / g.sw : 0;
  thread_local std::vector<T> phase_buf;
  if (g.sw > 1) phase_buf.assign(g.sw * phase_len, T(0));

  for (size_t n = 0; n < g.N; ++n) {
    // bias init
    for (size_t k = 0; k < g.K; ++k) {
      T* dst = out + (n * g.K + k) * g.To * out_plane;
      const T b = bias ? bias[k] : T(0);
      std::fill(dst, dst + g.To * out_plane, b);
    }
    for (size_t c = 0; c < g.C; ++c) {
      const T* in_c = in + (n * g.C + c) * g.T * g.H * g.W;
      for (size_t a = 0; a < g.kt; ++a) {
        size_t tlo, thi;
        tap_range(g.To, g.T, g.st, static_cast<long long>(a) - static_cast<long long>(g.pt),
                  tlo, thi);
        for (size_t to = tlo; to < thi; ++to) {
          size_t t = to * g.st + a - g.pt;
          for (size_t b2 = 0; b2 < g.kh; ++b2) {
            size_t hlo, hhi;
            tap_range(g.Ho, g.H, g.sh,
                      static_cast<long long>(b2) - static_cast<long long>(g.ph), hlo, hhi);
            for (size_t ho = hlo; ho < hhi; ++ho) {
              size_t h = ho * g.sh + b2 - g.ph;
              const T* row = in_c + (t * g.H + h) * in_row;
              if (g.sw > 1) {
                // deinterleave: phase_buf[p][i] = row[i*sw + p]
                for (size_t p = 0; p < g.sw; ++p) {
                  T* pb = phase_buf.data() + p * phase_len;
                  size_t cnt = (g.W - p + g.sw - 1) / g.sw;
                  for (size_t i = 0; i < cnt; ++i) pb[i] = row[i * g.sw + p];
                }
              }
              for (size_t d = 0; d < g.kw; ++d) {
                long long off = static_cast<long long>(d) - static_cast<long long>(g.pw);
                size_t wlo, whi;
                tap_range(g.Wo, g.W, g.sw, off, wlo, whi);
                if (wlo >= whi) continue;
                const T* src;
                long long shift; // src index = wo + shift
                if (g.sw == 1) {
                  src = row;
                  shift = off;
                } else {
                  long long p = ((off % static_cast<long long>(g.sw)) +
                                 static_cast<long long>(g.sw)) %
                                static_cast<long long>(g.sw);
                  src = phase_buf.data() + static_cast<size_t>(p) * phase_len;
                  shift = (off - p) / static_cast<long long>(g.sw);
                }
                const T* srcp = src + shift; // valid over [wlo, whi)
                const size_t tap = (a * g.kh + b2) * g.kw + d;
                for (size_t k = 0; k < g.K; ++k) {
                  const T kv = ker[(k * g.C + c) * g.kt * g.kh * g.kw + tap];
                  T* orow = out + ((n * g.K + k) * g.To + to) * out_plane + ho * g.Wo;
                  for (size_t wo = wlo; wo < whi; ++wo)
                    orow[wo] = std::fma(kv, srcp[wo], orow[wo]);
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward(const ConvGeom& g, const T* in, const T* ker, const T* gout, T* gin,
                     T* gker, T* gbias) {
  const size_t out_plane = g.Ho * g.Wo;
  if (gbias) {
    for (size_t k = 0; k < g.K; ++k) {
      T acc = T(0);
      for (size_t n = 0; n < g.N; ++n) {
        const T* go = gout + (n * g.K + k) * g.To * out_plane;
        for (size_t i = 0; i < g.To * out_plane; ++i) acc += go[i];
      }
      gbias[k] += acc;
    }
  }
  for (size_t n = 0; n < g.N; ++n) {
    for (size_t c = 0; c < g.C; ++c) {
      const T* in_c = in + (n * g.C + c) * g.T * g.H * g.W;
      T* gin_c = gin ? gin + (n * g.C + c) * g.T * g.H * g.W : nullptr;
      for (size_t a = 0; a < g.kt; ++a) {
        size_t tlo, thi;
        tap_range(g.To, g.T, g.st, static_cast<long long>(a) - static_cast<long long>(g.pt),
                  tlo, thi);
        for (size_t b2 = 0; b2 < g.kh; ++b2) {
          size_t hlo, hhi;
          tap_range(g.Ho, g.H, g.sh,
                    static_cast<long long>(b2) - static_cast<long long>(g.ph), hlo, hhi);
          for (size_t d = 0; d < g.kw; ++d) {
            long long off = static_cast<long long>(d) - static_cast<long long>(g.pw);
            size_t wlo, whi;
            tap_range(g.Wo, g.W, g.sw, off, wlo, whi);
            if (wlo >= whi || tlo >= thi || hlo >= hhi) continue;
            const size_t tap = (a * g.kh + b2) * g.kw + d;
            for (size_t k = 0; k < g.K; ++k) {
              const T kv = ker[(k * g.C + c) * g.kt * g.kh * g.kw + tap];
              T kacc = T(0);
              for (size_t to = tlo; to < thi; ++to) {
                size_t t = to * g.st + a - g.pt;
                for (size_t ho = hlo; ho < hhi; ++ho) {
                  size_t h = ho * g.sh + b2 - g.ph;
                  const T* irow = in_c + (t * g.H + h) * g.W;
                  const T* grow = gout + ((n * g.K + k) * g.To + to) * out_plane + ho * g.Wo;
                  T* girow = gin_c ? gin_c + (t * g.H + h) * g.W : nullptr;
                  if (gker) {
                    T dot = T(0);
                    for (size_t wo = wlo; wo < whi; ++wo)
                      dot = std::fma(grow[wo], irow[wo * g.sw + off], dot);
                    kacc += dot;
                  }
                  if (girow) {
                    for (size_t wo = wlo; wo < whi; ++wo)
                      girow[wo * g.sw + off] = std::fma(kv, grow[wo], girow[wo * g.sw + off]);
                  }
                }
              }
              if (gker) gker[(k * g.C + c) * g.kt * g.kh * g.kw + tap] += kacc;
            }
          }
        }
      }
    }
  }
}

} // namespace detail

// 3-D convolution over N x C x T x H x W input with K x C x kt x kh x kw
// kernel, zero padding. bias may be an undefined tensor (no bias term).
// Differentiable in input, kernel and bias.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Dims3 stride, Dims3 padding, bool use_reference = false) {
  auto g = detail::conv_geom(input.shape(), kernel.shape(), stride, padding);
  if (bias.defined())
    detail::check(bias.shape() == Shape{g.K},
                  "conv3d: bias must have shape [K]=" + std::to_string(g.K) + ", got " +
                      shape_str(bias.shape()));
  std::vector<T> out(g.N * g.K * g.To * g.Ho * g.Wo);
  const T* bptr = bias.defined() ? bias.data().data() : nullptr;
  if (use_reference)
    detail::conv3d_forward_reference(g, input.data().data(), kernel.data().data(), bptr,
                                     out.data());
  else
    detail::conv3d_forward_fast(g, input.data().data(), kernel.data().data(), bptr,
                                out.data());

  auto in_node = input.node();
  auto ker_node = kernel.node();
  auto bias_node = bias.defined() ? bias.node() : nullptr;
  return Tensor<T>::make_op(
      {g.N, g.K, g.To, g.Ho, g.Wo}, std::move(out), {input, kernel, bias},
      [g, in_node, ker_node, bias_node](detail::Node<T>& self) {
        T* gin = nullptr;
        T* gker = nullptr;
        T* gbias = nullptr;
        if (in_node->requires_grad) {
          in_node->ensure_grad();
          gin = in_node->grad.data();
        }
        if (ker_node->requires_grad) {
          ker_node->ensure_grad();
          gker = ker_node->grad.data();
        }
        if (bias_node && bias_node->requires_grad) {
          bias_node->ensure_grad();
          gbias = bias_node->grad.data();
        }
        detail::conv3d_backward(g, in_node->value.data(), ker_node->value.data(),
                                self.grad.data(), gin, gker, gbias);
      });
}

// Per-channel batch normalization over N x C x T x H x W. Train mode uses
// the batch mean and population variance and refreshes the running
// statistics in place; eval mode normalizes with the running statistics.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      T eps = T(1e-5), T momentum = T(0.1), bool update_running = true) {
  detail::check(input.rank() == 5,
                "batchnorm3d: input must be N x C x T x H x W, got " + shape_str(input.shape()));
  const size_t N = input.shape()[0], C = input.shape()[1];
  const size_t spatial = input.shape()[2] * input.shape()[3] * input.shape()[4];
  const size_t per_channel = N * spatial;
  detail::check(scale.shape() == Shape{C} && shift.shape() == Shape{C},
                "batchnorm3d: scale/shift must have shape [C]");
  detail::check(running_mean.shape() == Shape{C} && running_var.shape() == Shape{C},
                "batchnorm3d: running stats must have shape [C]");
  if (mode == Mode::train)
    detail::check(per_channel >= 2,
                  "batchnorm3d: train mode needs >= 2 elements per channel, got " +
                      std::to_string(per_channel));

  const auto& x = input.data();
  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::train) {
    for (size_t c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * spatial;
        for (size_t i = 0; i < spatial; ++i) {
          double v = static_cast<double>(p[i]);
          s += v;
          s2 += v * v;
        }
      }
      double mu = s / static_cast<double>(per_channel);
      double var = s2 / static_cast<double>(per_channel) - mu * mu;
      if (var < 0.0) var = 0.0; // numeric guard
      mean[c] = static_cast<T>(mu);
      inv_std[c] = T(1) / std::sqrt(static_cast<T>(var) + eps);
      if (update_running) {
        running_mean.mutable_data()[c] =
            (T(1) - momentum) * running_mean.data()[c] + momentum * static_cast<T>(mu);
        running_var.mutable_data()[c] =
            (T(1) - momentum) * running_var.data()[c] + momentum * static_cast<T>(var);
      }
    }
  } else {
    for (size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  for (size_t n = 0; n < N; ++n)
    for (size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * spatial;
      T* xh = xhat->data() + (n * C + c) * spatial;
      T* o = out.data() + (n * C + c) * spatial;
      const T mu = mean[c], is = inv_std[c], sc = scale.data()[c], sh = shift.data()[c];
      for (size_t i = 0; i < spatial; ++i) {
        T v = (p[i] - mu) * is;
        xh[i] = v;
        o[i] = sc * v + sh;
      }
    }

  auto in_node = input.node();
  auto scale_node = scale.node();
  auto shift_node = shift.node();
  bool train = mode == Mode::train;
  auto inv = std::make_shared<std::vector<T>>(std::move(inv_std));
  return Tensor<T>::make_op(
      input.shape(), std::move(out), {input, scale, shift},
      [N, C, spatial, per_channel, xhat, inv, in_node, scale_node, shift_node,
       train](detail::Node<T>& self) {
        const std::vector<T>& g = self.grad;
        if (scale_node->requires_grad || shift_node->requires_grad) {
          scale_node->ensure_grad();
          shift_node->ensure_grad();
          for (size_t c = 0; c < C; ++c) {
            double ds = 0.0, db = 0.0;
            for (size_t n = 0; n < N; ++n) {
              const T* gp = g.data() + (n * C + c) * spatial;
              const T* xh = xhat->data() + (n * C + c) * spatial;
              for (size_t i = 0; i < spatial; ++i) {
                ds += static_cast<double>(gp[i]) * static_cast<double>(xh[i]);
                db += static_cast<double>(gp[i]);
              }
            }
            if (scale_node->requires_grad) scale_node->grad[c] += static_cast<T>(ds);
            if (shift_node->requires_grad) shift_node->grad[c] += static_cast<T>(db);
          }
        }
        if (in_node->requires_grad) {
          in_node->ensure_grad();
          for (size_t c = 0; c < C; ++c) {
            const T sc = scale_node->value[c], is = (*inv)[c];
            if (train) {
              double s1 = 0.0, s2 = 0.0;
              for (size_t n = 0; n < N; ++n) {
                const T* gp = g.data() + (n * C + c) * spatial;
                const T* xh = xhat->data() + (n * C + c) * spatial;
                for (size_t i = 0; i < spatial; ++i) {
                  s1 += static_cast<double>(gp[i]);
                  s2 += static_cast<double>(gp[i]) * static_cast<double>(xh[i]);
                }
              }
              const T m1 = static_cast<T>(s1 / static_cast<double>(per_channel));
              const T m2 = static_cast<T>(s2 / static_cast<double>(per_channel));
              for (size_t n = 0; n < N; ++n) {
                const T* gp = g.data() + (n * C + c) * spatial;
                const T* xh = xhat->data() + (n * C + c) * spatial;
                T* gi = in_node->grad.data() + (n * C + c) * spatial;
                for (size_t i = 0; i < spatial; ++i)
                  gi[i] += sc * is * (gp[i] - m1 - xh[i] * m2);
              }
            } else {
              for (size_t n = 0; n < N; ++n) {
                const T* gp = g.data() + (n * C + c) * spatial;
                T* gi = in_node->grad.data() + (n * C + c) * spatial;
                for (size_t i = 0; i < spatial; ++i) gi[i] += sc * is * gp[i];
              }
            }
          }
        }
      });
}

// Elementwise max(x, 0). Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto& x = input.data();
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto in_node = input.node();
  return Tensor<T>::make_op(input.shape(), std::move(out), {input},
                            [in_node](detail::Node<T>& self) {
                              if (!in_node->requires_grad) return;
                              in_node->ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                if (in_node->value[i] > T(0))
                                  in_node->grad[i] += self.grad[i];
                            });
}

// Max pooling over T x H x W windows. Padded positions never win the max;
// ties resolve to the first element in (kt, kh, kw) scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, Dims3 kernel, Dims3 stride, Dims3 padding) {
  Shape kshape{1, input.shape().size() >= 2 ? input.shape()[1] : 1, kernel[0], kernel[1],
               kernel[2]};
  detail::check(input.rank() == 5,
                "maxpool3d: input must be N x C x T x H x W, got " + shape_str(input.shape()));
  detail::ConvGeom g =
      detail::conv_geom(input.shape(),
                        Shape{1, input.shape()[1], kernel[0], kernel[1], kernel[2]}, stride,
                        padding);
  const size_t out_sz = g.N * g.C * g.To * g.Ho * g.Wo;
  std::vector<T> out(out_sz);
  auto argmax = std::make_shared<std::vector<uint32_t>>(out_sz);
  const auto& x = input.data();
  size_t oi = 0;
  for (size_t n = 0; n < g.N; ++n)
    for (size_t c = 0; c < g.C; ++c) {
      const T* in_c = x.data() + (n * g.C + c) * g.T * g.H * g.W;
      for (size_t to = 0; to < g.To; ++to)
        for (size_t ho = 0; ho < g.Ho; ++ho)
          for (size_t wo = 0; wo < g.Wo; ++wo, ++oi) {
            T best = -std::numeric_limits<T>::infinity();
            uint32_t best_idx = 0;
            bool any = false;
            for (size_t a = 0; a < g.kt; ++a) {
              long long t = static_cast<long long>(to * g.st + a) -
                            static_cast<long long>(g.pt);
              if (t < 0 || t >= static_cast<long long>(g.T)) continue;
              for (size_t b = 0; b < g.kh; ++b) {
                long long h = static_cast<long long>(ho * g.sh + b) -
                              static_cast<long long>(g.ph);
                if (h < 0 || h >= static_cast<long long>(g.H)) continue;
                for (size_t d = 0; d < g.kw; ++d) {
                  long long w = static_cast<long long>(wo * g.sw + d) -
                                static_cast<long long>(g.pw);
                  if (w < 0 || w >= static_cast<long long>(g.W)) continue;
                  size_t idx = (static_cast<size_t>(t) * g.H + static_cast<size_t>(h)) * g.W +
                               static_cast<size_t>(w);
                  if (!any || in_c[idx] > best) {
                    best = in_c[idx];
                    best_idx = static_cast<uint32_t>(idx);
                    any = true;
                  }
                }
              }
            }
            detail::check(any, "maxpool3d: empty pooling window");
            out[oi] = best;
            (*argmax)[oi] = best_idx;
          }
    }

  auto in_node = input.node();
  const size_t in_chan = g.T * g.H * g.W;
  const size_t out_chan = g.To * g.Ho * g.Wo;
  const size_t NC = g.N * g.C;
  return Tensor<T>::make_op({g.N, g.C, g.To, g.Ho, g.Wo}, std::move(out), {input},
                            [in_node, argmax, NC, in_chan, out_chan](detail::Node<T>& self) {
                              if (!in_node->requires_grad) return;
                              in_node->ensure_grad();
                              for (size_t nc = 0; nc < NC; ++nc) {
                                T* gi = in_node->grad.data() + nc * in_chan;
                                const T* go = self.grad.data() + nc * out_chan;
                                const uint32_t* am = argmax->data() + nc * out_chan;
                                for (size_t i = 0; i < out_chan; ++i) gi[am[i]] += go[i];
                              }
                            });
}

// Mean over the T x H x W extent of each channel: N x C x T x H x W -> N x C.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::check(input.rank() == 5, "global_avg_pool: input must be N x C x T x H x W, got " +
                                       shape_str(input.shape()));
  const size_t N = input.shape()[0], C = input.shape()[1];
  const size_t spatial = input.shape()[2] * input.shape()[3] * input.shape()[4];
  detail::check(spatial >= 1, "global_avg_pool: empty spatial extent");
  std::vector<T> out(N * C);
  const auto& x = input.data();
  for (size_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    const T* p = x.data() + nc * spatial;
    for (size_t i = 0; i < spatial; ++i) s += static_cast<double>(p[i]);
    out[nc] = static_cast<T>(s / static_cast<double>(spatial));
  }
  auto in_node = input.node();
  return Tensor<T>::make_op({N, C}, std::move(out), {input},
                            [in_node, N, C, spatial](detail::Node<T>& self) {
                              if (!in_node->requires_grad) return;
                              in_node->ensure_grad();
                              const T inv = T(1) / static_cast<T>(spatial);
                              for (size_t nc = 0; nc < N * C; ++nc) {
                                const T gv = self.grad[nc] * inv;
                                T* gi = in_node->grad.data() + nc * spatial;
                                for (size_t i = 0; i < spatial; ++i) gi[i] += gv;
                              }
                            });
}

// Affine map: (N x d) . (d x n) + bias(n).
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  detail::check(input.rank() == 2, "linear: input must be N x d, got " + shape_str(input.shape()));
  detail::check(weights.rank() == 2,
                "linear: weights must be d x n, got " + shape_str(weights.shape()));
  const size_t N = input.shape()[0], d = input.shape()[1];
  detail::check(weights.shape()[0] == d,
                "linear: inner dimensions disagree: input d=" + std::to_string(d) +
                    ", weights d=" + std::to_string(weights.shape()[0]));
  const size_t n = weights.shape()[1];
  detail::check(bias.defined() && bias.shape() == Shape{n},
                "linear: bias must have shape [n]=" + std::to_string(n));

  std::vector<T> out(N * n);
  const auto& x = input.data();
  const auto& w = weights.data();
  const auto& b = bias.data();
  for (size_t i = 0; i < N; ++i) {
    T* o = out.data() + i * n;
    for (size_t j = 0; j < n; ++j) o[j] = b[j];
    for (size_t k = 0; k < d; ++k) {
      const T xv = x[i * d + k];
      const T* wrow = w.data() + k * n;
      for (size_t j = 0; j < n; ++j) o[j] = std::fma(xv, wrow[j], o[j]);
    }
  }

  auto in_node = input.node();
  auto w_node = weights.node();
  auto b_node = bias.node();
  return Tensor<T>::make_op(
      {N, n}, std::move(out), {input, weights, bias},
      [in_node, w_node, b_node, N, d, n](detail::Node<T>& self) {
        const auto& g = self.grad;
        if (b_node->requires_grad) {
          b_node->ensure_grad();
          for (size_t i = 0; i < N; ++i)
            for (size_t j = 0; j < n; ++j) b_node->grad[j] += g[i * n + j];
        }
        if (w_node->requires_grad) {
          w_node->ensure_grad();
          for (size_t i = 0; i < N; ++i)
            for (size_t k = 0; k < d; ++k) {
              const T xv = in_node->value[i * d + k];
              T* gw = w_node->grad.data() + k * n;
              const T* grow = g.data() + i * n;
              for (size_t j = 0; j < n; ++j) gw[j] = std::fma(xv, grow[j], gw[j]);
            }
        }
        if (in_node->requires_grad) {
          in_node->ensure_grad();
          for (size_t i = 0; i < N; ++i)
            for (size_t k = 0; k < d; ++k) {
              const T* wrow = w_node->value.data() + k * n;
              const T* grow = g.data() + i * n;
              T acc = T(0);
              for (size_t j = 0; j < n; ++j) acc = std::fma(wrow[j], grow[j], acc);
              in_node->grad[i * d + k] += acc;
            }
        }
      });
}

// Elementwise sum of two same-shape tensors.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                            shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

// Elementwise product of two same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                            shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

// Multiply by a compile-time constant factor.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto an = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [an, factor](detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * factor;
  });
}

// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  auto an = a.node();
  return Tensor<T>::make_op({1}, {acc}, {a}, [an](detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
  });
}

} // namespace fm3d
