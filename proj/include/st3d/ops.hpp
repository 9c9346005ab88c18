#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "st3d/parallel.hpp"
#include "st3d/tensor.hpp"

namespace st3d {

struct Dims3 {
  i64 t = 1, h = 1, w = 1;
  bool operator==(const Dims3&) const = default;
};

inline i64 conv_out_dim(i64 in, i64 kernel, i64 stride, i64 pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// 3-D convolution configuration. Weight layout is
// (out_channels, in_channels/groups, kt, kh, kw); convolutions carry no bias
// since every one is followed by batch normalization.
struct ConvParams {
  i64 in_channels = 0;
  i64 out_channels = 0;
  Dims3 kernel{1, 1, 1};
  Dims3 stride{1, 1, 1};
  Dims3 padding{0, 0, 0};
  i64 groups = 1;
  Tensor weight;

  static ConvParams make(i64 in_ch, i64 out_ch, Dims3 kernel,
                         Dims3 stride = {1, 1, 1}, Dims3 padding = {0, 0, 0},
                         i64 groups = 1) {
    ConvParams p;
    p.in_channels = in_ch;
    p.out_channels = out_ch;
    p.kernel = kernel;
    p.stride = stride;
    p.padding = padding;
    p.groups = groups;
    check(groups >= 1, "conv3d: groups must be >= 1");
    check(in_ch % groups == 0, "conv3d: in_channels " + std::to_string(in_ch) +
                                   " not divisible by groups " +
                                   std::to_string(groups));
    check(out_ch % groups == 0, "conv3d: out_channels " +
                                    std::to_string(out_ch) +
                                    " not divisible by groups " +
                                    std::to_string(groups));
    p.weight = Tensor(p.weight_shape());
    return p;
  }

  Shape5 weight_shape() const {
    return Shape5{out_channels, in_channels / groups, kernel.t, kernel.h,
                  kernel.w};
  }

  i64 fan_in() const {
    return (in_channels / groups) * kernel.t * kernel.h * kernel.w;
  }

  i64 param_count() const { return weight_shape().numel(); }
};

inline Shape5 conv3d_output_shape(const Shape5& in, const ConvParams& p) {
  check(in.c == p.in_channels,
        "conv3d: input has " + std::to_string(in.c) +
            " channels, expected in_channels=" + std::to_string(p.in_channels));
  const char* axis_name[3] = {"t", "h", "w"};
  i64 ins[3] = {in.t, in.h, in.w};
  i64 ks[3] = {p.kernel.t, p.kernel.h, p.kernel.w};
  i64 ss[3] = {p.stride.t, p.stride.h, p.stride.w};
  i64 ps[3] = {p.padding.t, p.padding.h, p.padding.w};
  i64 out[3];
  for (int a = 0; a < 3; ++a) {
    check(ks[a] >= 1 && ss[a] >= 1 && ps[a] >= 0,
          std::string("conv3d: invalid kernel/stride/padding on axis ") +
              axis_name[a]);
    out[a] = conv_out_dim(ins[a], ks[a], ss[a], ps[a]);
    check(out[a] >= 1, std::string("conv3d: non-positive output size on axis ") +
                           axis_name[a] + " (in=" + std::to_string(ins[a]) +
                           " k=" + std::to_string(ks[a]) + " s=" +
                           std::to_string(ss[a]) + " p=" + std::to_string(ps[a]) +
                           ")");
  }
  return Shape5{in.n, p.out_channels, out[0], out[1], out[2]};
}

namespace detail {

// Gathers the input window for one (sample, group, output-time) slice into a
// K x M patch matrix, K = (cin/groups)*kt*kh*kw, M = oh*ow, zero outside the
// input bounds. Row order matches the weight layout.
inline void fill_patch_tile(const float* x, const Shape5& xs, const ConvParams& p,
                            i64 b, i64 g, i64 ot, i64 oh, i64 ow, float* patch) {
  const i64 cg = p.in_channels / p.groups;
  const i64 M = oh * ow;
  i64 row = 0;
  for (i64 ic = 0; ic < cg; ++ic) {
    const i64 c = g * cg + ic;
    const float* xc = x + ((b * xs.c + c) * xs.t) * xs.h * xs.w;
    for (i64 kt = 0; kt < p.kernel.t; ++kt) {
      const i64 it = ot * p.stride.t - p.padding.t + kt;
      const bool t_ok = (it >= 0 && it < xs.t);
      const float* xt = xc + it * xs.h * xs.w;
      for (i64 kh = 0; kh < p.kernel.h; ++kh) {
        for (i64 kw = 0; kw < p.kernel.w; ++kw, ++row) {
          float* dst = patch + row * M;
          if (!t_ok) {
            std::fill(dst, dst + M, 0.0f);
            continue;
          }
          for (i64 y = 0; y < oh; ++y) {
            const i64 ih = y * p.stride.h - p.padding.h + kh;
            float* drow = dst + y * ow;
            if (ih < 0 || ih >= xs.h) {
              std::fill(drow, drow + ow, 0.0f);
              continue;
            }
            const float* xrow = xt + ih * xs.w;
            for (i64 x2 = 0; x2 < ow; ++x2) {
              const i64 iw = x2 * p.stride.w - p.padding.w + kw;
              drow[x2] = (iw >= 0 && iw < xs.w) ? xrow[iw] : 0.0f;
            }
          }
        }
      }
    }
  }
}

inline std::vector<float>& tls_patch() {
  thread_local std::vector<float> buf;
  return buf;
}

inline std::vector<double>& tls_acc() {
  thread_local std::vector<double> buf;
  return buf;
}

}  // namespace detail

// Cross-correlation (no kernel flip), zero padding, grouped channels.
// Each output value is reduced in a fixed order with a double accumulator, so
// results are bit-identical across runs and worker counts.
inline Tensor conv3d(const Tensor& x, const ConvParams& p, Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  const Shape5 os = conv3d_output_shape(xs, p);
  check(p.weight.defined(), "conv3d: weight not materialized");
  check(p.weight.shape() == p.weight_shape(),
        "conv3d: weight shape " + p.weight.shape().str() + " != expected " +
            p.weight_shape().str());

  const bool track = tape && (x.requires_grad() || p.weight.requires_grad());
  Tensor out(os, track);

  const i64 cg = p.in_channels / p.groups;
  const i64 ocg = p.out_channels / p.groups;
  const i64 K = cg * p.kernel.t * p.kernel.h * p.kernel.w;
  const i64 M = os.h * os.w;
  const float* xd = xs.numel() ? x.data() : nullptr;
  const float* wd = p.weight.numel() ? p.weight.data() : nullptr;
  float* od = os.numel() ? out.data() : nullptr;

  const i64 items = os.n * p.groups * os.t;
  parallel_for(items, [&](i64 item) {
    const i64 ot = item % os.t;
    const i64 g = (item / os.t) % p.groups;
    const i64 b = item / (os.t * p.groups);
    auto& patch = detail::tls_patch();
    auto& acc = detail::tls_acc();
    patch.resize(static_cast<size_t>(K * M));
    acc.resize(static_cast<size_t>(M));
    detail::fill_patch_tile(xd, xs, p, b, g, ot, os.h, os.w, patch.data());
    for (i64 oc = 0; oc < ocg; ++oc) {
      const float* wrow = wd + (g * ocg + oc) * K;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (i64 k = 0; k < K; ++k) {
        const double wv = wrow[k];
        const float* prow = patch.data() + k * M;
        for (i64 j = 0; j < M; ++j) acc[j] += wv * prow[j];
      }
      float* orow = od + (((b * os.c + g * ocg + oc) * os.t) + ot) * M;
      for (i64 j = 0; j < M; ++j) orow[j] = static_cast<float>(acc[j]);
    }
  });

  if (track) {
    Tensor weight = p.weight;
    ConvParams cfg = p;  // copies the weight handle, not the buffer
    tape->record([x, weight, out, cfg, xs, os, cg, ocg, K, M]() {
      const float* dy = out.grad();
      const float* wd2 = weight.data();
      // input gradient: one sample per work item, sequential scatter inside
      if (x.requires_grad()) {
        float* dx = x.grad();
        parallel_for(xs.n, [&](i64 b) {
          auto& dpatch = detail::tls_acc();
          dpatch.resize(static_cast<size_t>(K * M));
          for (i64 g = 0; g < cfg.groups; ++g) {
            for (i64 ot = 0; ot < os.t; ++ot) {
              std::fill(dpatch.begin(), dpatch.end(), 0.0);
              for (i64 oc = 0; oc < ocg; ++oc) {
                const float* wrow = wd2 + (g * ocg + oc) * K;
                const float* dyrow =
                    dy + (((b * os.c + g * ocg + oc) * os.t) + ot) * M;
                for (i64 k = 0; k < K; ++k) {
                  const double wv = wrow[k];
                  double* drow = dpatch.data() + k * M;
                  for (i64 j = 0; j < M; ++j) drow[j] += wv * dyrow[j];
                }
              }
              // scatter K x M back into the padded input window
              i64 row = 0;
              for (i64 ic = 0; ic < cg; ++ic) {
                const i64 c = g * cg + ic;
                for (i64 kt = 0; kt < cfg.kernel.t; ++kt) {
                  const i64 it = ot * cfg.stride.t - cfg.padding.t + kt;
                  if (it < 0 || it >= xs.t) {
                    row += cfg.kernel.h * cfg.kernel.w;
                    continue;
                  }
                  float* dxt =
                      dx + ((b * xs.c + c) * xs.t + it) * xs.h * xs.w;
                  for (i64 kh = 0; kh < cfg.kernel.h; ++kh) {
                    for (i64 kw = 0; kw < cfg.kernel.w; ++kw, ++row) {
                      const double* drow = dpatch.data() + row * M;
                      for (i64 y = 0; y < os.h; ++y) {
                        const i64 ih = y * cfg.stride.h - cfg.padding.h + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        float* dxrow = dxt + ih * xs.w;
                        for (i64 x2 = 0; x2 < os.w; ++x2) {
                          const i64 iw = x2 * cfg.stride.w - cfg.padding.w + kw;
                          if (iw >= 0 && iw < xs.w)
                            dxrow[iw] += static_cast<float>(drow[y * os.w + x2]);
                        }
                      }
                    }
                  }
                }
              }
            }
          }
        });
      }
      // weight gradient: per-sample partials, reduced in fixed sample order
      if (weight.requires_grad()) {
        const i64 wn = weight.numel();
        std::vector<double> partials(static_cast<size_t>(xs.n * wn), 0.0);
        const float* xd2 = x.numel() ? x.data() : nullptr;
        parallel_for(xs.n, [&](i64 b) {
          double* part = partials.data() + b * wn;
          auto& patch = detail::tls_patch();
          patch.resize(static_cast<size_t>(K * M));
          for (i64 g = 0; g < cfg.groups; ++g) {
            for (i64 ot = 0; ot < os.t; ++ot) {
              detail::fill_patch_tile(xd2, xs, cfg, b, g, ot, os.h, os.w,
                                      patch.data());
              for (i64 oc = 0; oc < ocg; ++oc) {
                const float* dyrow =
                    dy + (((b * os.c + g * ocg + oc) * os.t) + ot) * M;
                double* wgrow = part + (g * ocg + oc) * K;
                for (i64 k = 0; k < K; ++k) {
                  const float* prow = patch.data() + k * M;
                  double s = 0.0;
                  for (i64 j = 0; j < M; ++j) s += double(dyrow[j]) * prow[j];
                  wgrow[k] += s;
                }
              }
            }
          }
        });
        float* wg = weight.grad();
        for (i64 idx = 0; idx < wn; ++idx) {
          double s = 0.0;
          for (i64 b = 0; b < xs.n; ++b) s += partials[b * wn + idx];
          wg[idx] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

// Per-channel affine normalization. Training mode normalizes by batch
// statistics over (n,t,h,w) with the biased 1/N variance and folds them into
// the running estimates; inference mode is a deterministic affine map of the
// running statistics.
struct BatchNormParams {
  Tensor gamma, beta;                      // trainable, shape (1,c,1,1,1)
  Tensor running_mean, running_var;        // buffers, same shape
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BatchNormParams make(i64 channels) {
    BatchNormParams p;
    Shape5 s{1, channels, 1, 1, 1};
    p.gamma = Tensor::full(s, 1.0f);
    p.beta = Tensor(s);
    p.running_mean = Tensor(s);
    p.running_var = Tensor::full(s, 1.0f);
    return p;
  }

  i64 channels() const { return gamma.shape().c; }
  i64 param_count() const { return 2 * channels(); }
};

inline Tensor batch_norm(const Tensor& x, const BatchNormParams& p,
                         bool training, Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  const i64 C = p.channels();
  check(xs.c == C, "batch_norm: input has " + std::to_string(xs.c) +
                       " channels, parameters cover " + std::to_string(C));
  check(p.gamma.defined() && p.beta.defined() && p.running_mean.defined() &&
            p.running_var.defined(),
        "batch_norm: parameters not materialized");
  const i64 per_channel = xs.n * xs.t * xs.h * xs.w;
  if (training) {
    check(per_channel > 0,
          "batch_norm: degenerate batch, zero elements per channel");
  }

  const bool track =
      tape && (x.requires_grad() || p.gamma.requires_grad() ||
               p.beta.requires_grad());
  Tensor out(xs, track);

  std::vector<float> mean(C), inv_std(C);
  const i64 plane = xs.t * xs.h * xs.w;
  const float* xd = xs.numel() ? x.data() : nullptr;

  if (training) {
    float* rm = p.running_mean.data();
    float* rv = p.running_var.data();
    parallel_for(C, [&](i64 c) {
      double sum = 0.0, sumsq = 0.0;
      for (i64 b = 0; b < xs.n; ++b) {
        const float* xp = xd + (b * C + c) * plane;
        for (i64 i = 0; i < plane; ++i) {
          const double v = xp[i];
          sum += v;
          sumsq += v * v;
        }
      }
      const double mu = sum / per_channel;
      double var = sumsq / per_channel - mu * mu;
      if (var < 0.0) var = 0.0;
      mean[c] = static_cast<float>(mu);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + double(p.eps)));
      rm[c] = (1.0f - p.momentum) * rm[c] + p.momentum * static_cast<float>(mu);
      rv[c] = (1.0f - p.momentum) * rv[c] + p.momentum * static_cast<float>(var);
    });
  } else {
    const float* rm = p.running_mean.data();
    const float* rv = p.running_var.data();
    for (i64 c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] =
          static_cast<float>(1.0 / std::sqrt(double(rv[c]) + double(p.eps)));
    }
  }

  const float* gm = p.gamma.data();
  const float* bt = p.beta.data();
  float* od = xs.numel() ? out.data() : nullptr;
  parallel_for(xs.n * C, [&](i64 item) {
    const i64 c = item % C;
    const float* xp = xd + item * plane;
    float* op = od + item * plane;
    const float mu = mean[c], is = inv_std[c], g = gm[c], b2 = bt[c];
    for (i64 i = 0; i < plane; ++i) op[i] = (xp[i] - mu) * is * g + b2;
  });

  if (track) {
    Tensor gamma = p.gamma, beta = p.beta;
    tape->record([x, gamma, beta, out, mean, inv_std, training, xs, C, plane,
                  per_channel]() {
      const float* dy = out.grad();
      const float* xd2 = x.numel() ? x.data() : nullptr;
      const float* gm2 = gamma.data();
      const bool dx_needed = x.requires_grad();
      const bool dg_needed = gamma.requires_grad();
      const bool db_needed = beta.requires_grad();
      float* dx = dx_needed ? x.grad() : nullptr;
      float* dg = dg_needed ? gamma.grad() : nullptr;
      float* db = db_needed ? beta.grad() : nullptr;
      parallel_for(C, [&](i64 c) {
        const float mu = mean[c], is = inv_std[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (i64 b = 0; b < xs.n; ++b) {
          const i64 base = (b * C + c) * plane;
          for (i64 i = 0; i < plane; ++i) {
            const double d = dy[base + i];
            sum_dy += d;
            sum_dy_xhat += d * double((xd2[base + i] - mu) * is);
          }
        }
        if (dg_needed) dg[c] += static_cast<float>(sum_dy_xhat);
        if (db_needed) db[c] += static_cast<float>(sum_dy);
        if (!dx_needed) return;
        const double g = gm2[c];
        if (training) {
          const double mean_dy = sum_dy / per_channel;
          const double mean_dy_xhat = sum_dy_xhat / per_channel;
          for (i64 b = 0; b < xs.n; ++b) {
            const i64 base = (b * C + c) * plane;
            for (i64 i = 0; i < plane; ++i) {
              const double xhat = double((xd2[base + i] - mu) * is);
              dx[base + i] += static_cast<float>(
                  g * is * (double(dy[base + i]) - mean_dy - xhat * mean_dy_xhat));
            }
          }
        } else {
          for (i64 b = 0; b < xs.n; ++b) {
            const i64 base = (b * C + c) * plane;
            for (i64 i = 0; i < plane; ++i)
              dx[base + i] += static_cast<float>(g * is * double(dy[base + i]));
          }
        }
      });
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x, Tape* tape = nullptr) {
  const bool track = tape && x.requires_grad();
  Tensor out(x.shape(), track);
  const i64 n = x.numel();
  const float* xd = n ? x.data() : nullptr;
  float* od = n ? out.data() : nullptr;
  for (i64 i = 0; i < n; ++i) od[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  if (track) {
    tape->record([x, out, n]() {
      const float* dy = out.grad();
      const float* xd2 = n ? x.data() : nullptr;
      float* dx = x.grad();
      for (i64 i = 0; i < n; ++i) {
        if (xd2[i] > 0.0f) dx[i] += dy[i];
      }
    });
  }
  return out;
}

enum class PoolMode { Max, Avg };

// Window pooling. Padding never contributes: max ignores padded positions,
// avg divides by the in-bounds count.
inline Tensor pool3d(const Tensor& x, PoolMode mode, Dims3 kernel, Dims3 stride,
                     Dims3 padding, Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  ConvParams shape_proxy;
  shape_proxy.in_channels = xs.c;
  shape_proxy.out_channels = xs.c;
  shape_proxy.kernel = kernel;
  shape_proxy.stride = stride;
  shape_proxy.padding = padding;
  const char* axis_name[3] = {"t", "h", "w"};
  i64 ks[3] = {kernel.t, kernel.h, kernel.w};
  i64 ps[3] = {padding.t, padding.h, padding.w};
  for (int a = 0; a < 3; ++a) {
    check(ps[a] < ks[a], std::string("pool3d: empty window on axis ") +
                             axis_name[a] + " (padding >= kernel)");
  }
  const Shape5 os = conv3d_output_shape(xs, shape_proxy);

  const bool track = tape && x.requires_grad();
  Tensor out(os, track);
  const i64 out_plane = os.t * os.h * os.w;
  // argmax indices, only kept while a tape needs them
  std::vector<i64> argmax;
  if (track && mode == PoolMode::Max)
    argmax.resize(static_cast<size_t>(os.numel()));

  const float* xd = xs.numel() ? x.data() : nullptr;
  float* od = os.numel() ? out.data() : nullptr;
  i64* am = argmax.empty() ? nullptr : argmax.data();

  parallel_for(xs.n * xs.c, [&](i64 item) {
    const float* xp = xd + item * xs.t * xs.h * xs.w;
    float* op = od + item * out_plane;
    i64* ap = am ? am + item * out_plane : nullptr;
    i64 o = 0;
    for (i64 ot = 0; ot < os.t; ++ot) {
      const i64 t0 = ot * stride.t - padding.t;
      for (i64 oy = 0; oy < os.h; ++oy) {
        const i64 h0 = oy * stride.h - padding.h;
        for (i64 ox = 0; ox < os.w; ++ox, ++o) {
          const i64 w0 = ox * stride.w - padding.w;
          if (mode == PoolMode::Max) {
            float best = -std::numeric_limits<float>::infinity();
            i64 best_idx = -1;
            for (i64 kt = 0; kt < kernel.t; ++kt) {
              const i64 it = t0 + kt;
              if (it < 0 || it >= xs.t) continue;
              for (i64 kh = 0; kh < kernel.h; ++kh) {
                const i64 ih = h0 + kh;
                if (ih < 0 || ih >= xs.h) continue;
                for (i64 kw = 0; kw < kernel.w; ++kw) {
                  const i64 iw = w0 + kw;
                  if (iw < 0 || iw >= xs.w) continue;
                  const i64 idx = (it * xs.h + ih) * xs.w + iw;
                  if (xp[idx] > best) {
                    best = xp[idx];
                    best_idx = idx;
                  }
                }
              }
            }
            op[o] = best;
            if (ap) ap[o] = best_idx;
          } else {
            double sum = 0.0;
            i64 count = 0;
            for (i64 kt = 0; kt < kernel.t; ++kt) {
              const i64 it = t0 + kt;
              if (it < 0 || it >= xs.t) continue;
              for (i64 kh = 0; kh < kernel.h; ++kh) {
                const i64 ih = h0 + kh;
                if (ih < 0 || ih >= xs.h) continue;
                for (i64 kw = 0; kw < kernel.w; ++kw) {
                  const i64 iw = w0 + kw;
                  if (iw < 0 || iw >= xs.w) continue;
                  sum += xp[(it * xs.h + ih) * xs.w + iw];
                  ++count;
                }
              }
            }
            op[o] = static_cast<float>(sum / count);
          }
        }
      }
    }
  });

  if (track) {
    tape->record([x, out, xs, os, out_plane, mode, kernel, stride, padding,
                  argmax = std::move(argmax)]() {
      const float* dy = out.grad();
      float* dx = x.grad();
      parallel_for(xs.n * xs.c, [&](i64 item) {
        const i64 in_plane = xs.t * xs.h * xs.w;
        float* dxp = dx + item * in_plane;
        const float* dyp = dy + item * out_plane;
        if (mode == PoolMode::Max) {
          const i64* ap = argmax.data() + item * out_plane;
          for (i64 o = 0; o < out_plane; ++o) {
            if (ap[o] >= 0) dxp[ap[o]] += dyp[o];
          }
          return;
        }
        i64 o = 0;
        for (i64 ot = 0; ot < os.t; ++ot) {
          const i64 t0 = ot * stride.t - padding.t;
          for (i64 oy = 0; oy < os.h; ++oy) {
            const i64 h0 = oy * stride.h - padding.h;
            for (i64 ox = 0; ox < os.w; ++ox, ++o) {
              const i64 w0 = ox * stride.w - padding.w;
              i64 count = 0;
              for (i64 kt = 0; kt < kernel.t; ++kt) {
                const i64 it = t0 + kt;
                if (it < 0 || it >= xs.t) continue;
                for (i64 kh = 0; kh < kernel.h; ++kh) {
                  const i64 ih = h0 + kh;
                  if (ih < 0 || ih >= xs.h) continue;
                  for (i64 kw = 0; kw < kernel.w; ++kw) {
                    const i64 iw = w0 + kw;
                    if (iw >= 0 && iw < xs.w) ++count;
                  }
                }
              }
              const float share = dyp[o] / static_cast<float>(count);
              for (i64 kt = 0; kt < kernel.t; ++kt) {
                const i64 it = t0 + kt;
                if (it < 0 || it >= xs.t) continue;
                for (i64 kh = 0; kh < kernel.h; ++kh) {
                  const i64 ih = h0 + kh;
                  if (ih < 0 || ih >= xs.h) continue;
                  for (i64 kw = 0; kw < kernel.w; ++kw) {
                    const i64 iw = w0 + kw;
                    if (iw >= 0 && iw < xs.w)
                      dxp[(it * xs.h + ih) * xs.w + iw] += share;
                  }
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

inline Tensor global_avg_pool(const Tensor& x, Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  check(xs.t >= 1 && xs.h >= 1 && xs.w >= 1,
        "global_avg_pool: needs t,h,w >= 1, got " + xs.str());
  const bool track = tape && x.requires_grad();
  Tensor out(Shape5{xs.n, xs.c, 1, 1, 1}, track);
  const i64 plane = xs.t * xs.h * xs.w;
  const float* xd = xs.numel() ? x.data() : nullptr;
  float* od = out.numel() ? out.data() : nullptr;
  parallel_for(xs.n * xs.c, [&](i64 item) {
    const float* xp = xd + item * plane;
    double sum = 0.0;
    for (i64 i = 0; i < plane; ++i) sum += xp[i];
    od[item] = static_cast<float>(sum / plane);
  });
  if (track) {
    tape->record([x, out, plane]() {
      const float* dy = out.grad();
      float* dx = x.grad();
      const i64 nc = out.numel();
      for (i64 item = 0; item < nc; ++item) {
        const float share = dy[item] / static_cast<float>(plane);
        float* dxp = dx + item * plane;
        for (i64 i = 0; i < plane; ++i) dxp[i] += share;
      }
    });
  }
  return out;
}

// Affine map on feature rows: input (n, f, 1,1,1), weight (classes, f, 1,1,1),
// bias (classes, 1,1,1,1) -> (n, classes, 1,1,1).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  const Shape5 ws = weight.shape();
  check(xs.t == 1 && xs.h == 1 && xs.w == 1,
        "linear: input is not a feature matrix, shape " + xs.str());
  check(ws.c == xs.c, "linear: input features " + std::to_string(xs.c) +
                          " != weight features " + std::to_string(ws.c));
  check(bias.numel() == ws.n, "linear: bias length " +
                                  std::to_string(bias.numel()) +
                                  " != class count " + std::to_string(ws.n));
  const i64 N = xs.n, F = xs.c, C = ws.n;
  const bool track = tape && (x.requires_grad() || weight.requires_grad() ||
                              bias.requires_grad());
  Tensor out(Shape5{N, C, 1, 1, 1}, track);
  const float* xd = x.numel() ? x.data() : nullptr;
  const float* wd = weight.data();
  const float* bd = bias.data();
  float* od = out.numel() ? out.data() : nullptr;
  for (i64 i = 0; i < N; ++i) {
    for (i64 o = 0; o < C; ++o) {
      double acc = bd[o];
      const float* wrow = wd + o * F;
      const float* xrow = xd + i * F;
      for (i64 f = 0; f < F; ++f) acc += double(xrow[f]) * wrow[f];
      od[i * C + o] = static_cast<float>(acc);
    }
  }
  if (track) {
    tape->record([x, weight, bias, out, N, F, C]() {
      const float* dy = out.grad();
      const float* xd2 = x.numel() ? x.data() : nullptr;
      const float* wd2 = weight.data();
      if (x.requires_grad()) {
        float* dx = x.grad();
        for (i64 i = 0; i < N; ++i) {
          for (i64 f = 0; f < F; ++f) {
            double acc = 0.0;
            for (i64 o = 0; o < C; ++o)
              acc += double(dy[i * C + o]) * wd2[o * F + f];
            dx[i * F + f] += static_cast<float>(acc);
          }
        }
      }
      if (weight.requires_grad()) {
        float* dw = weight.grad();
        for (i64 o = 0; o < C; ++o) {
          for (i64 f = 0; f < F; ++f) {
            double acc = 0.0;
            for (i64 i = 0; i < N; ++i)
              acc += double(dy[i * C + o]) * xd2[i * F + f];
            dw[o * F + f] += static_cast<float>(acc);
          }
        }
      }
      if (bias.requires_grad()) {
        float* db = bias.grad();
        for (i64 o = 0; o < C; ++o) {
          double acc = 0.0;
          for (i64 i = 0; i < N; ++i) acc += dy[i * C + o];
          db[o] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

// Channel concatenation, a's channels first. Backward splits the gradient.
inline Tensor concat_channels(const Tensor& a, const Tensor& b,
                              Tape* tape = nullptr) {
  const Shape5 as = a.shape(), bs = b.shape();
  check(as.n == bs.n && as.t == bs.t && as.h == bs.h && as.w == bs.w,
        "concat_channels: non-channel dims differ, " + as.str() + " vs " +
            bs.str());
  const bool track = tape && (a.requires_grad() || b.requires_grad());
  Tensor out(Shape5{as.n, as.c + bs.c, as.t, as.h, as.w}, track);
  const i64 plane = as.t * as.h * as.w;
  const float* ad = a.numel() ? a.data() : nullptr;
  const float* bd = b.numel() ? b.data() : nullptr;
  float* od = out.numel() ? out.data() : nullptr;
  for (i64 i = 0; i < as.n; ++i) {
    std::copy(ad + i * as.c * plane, ad + (i + 1) * as.c * plane,
              od + i * (as.c + bs.c) * plane);
    std::copy(bd + i * bs.c * plane, bd + (i + 1) * bs.c * plane,
              od + (i * (as.c + bs.c) + as.c) * plane);
  }
  if (track) {
    tape->record([a, b, out, as, bs, plane]() {
      const float* dy = out.grad();
      const i64 oc = as.c + bs.c;
      if (a.requires_grad()) {
        float* da = a.grad();
        for (i64 i = 0; i < as.n; ++i) {
          const float* src = dy + i * oc * plane;
          float* dst = da + i * as.c * plane;
          for (i64 k = 0; k < as.c * plane; ++k) dst[k] += src[k];
        }
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        for (i64 i = 0; i < bs.n; ++i) {
          const float* src = dy + (i * oc + as.c) * plane;
          float* dst = db + i * bs.c * plane;
          for (i64 k = 0; k < bs.c * plane; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return out;
}

// plain channel slice [c0, c1), no gradient tracking
inline Tensor slice_channels(const Tensor& x, i64 c0, i64 c1) {
  const Shape5 xs = x.shape();
  check(0 <= c0 && c0 < c1 && c1 <= xs.c, "slice_channels: bad range");
  Tensor out(Shape5{xs.n, c1 - c0, xs.t, xs.h, xs.w});
  const i64 plane = xs.t * xs.h * xs.w;
  for (i64 i = 0; i < xs.n; ++i) {
    std::copy(x.data() + (i * xs.c + c0) * plane,
              x.data() + (i * xs.c + c1) * plane,
              out.data() + i * (c1 - c0) * plane);
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  check(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() +
                                    " vs " + b.shape().str());
  const bool track = tape && (a.requires_grad() || b.requires_grad());
  Tensor out(a.shape(), track);
  const i64 n = a.numel();
  const float* ad = n ? a.data() : nullptr;
  const float* bd = n ? b.data() : nullptr;
  float* od = n ? out.data() : nullptr;
  for (i64 i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
  if (track) {
    tape->record([a, b, out, n]() {
      const float* dy = out.grad();
      if (a.requires_grad()) {
        float* da = a.grad();
        for (i64 i = 0; i < n; ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        for (i64 i = 0; i < n; ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x, Tape* tape = nullptr) {
  const bool track = tape && x.requires_grad();
  Tensor out(Shape5{1, 1, 1, 1, 1}, track);
  double acc = 0.0;
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) acc += x.data()[i];
  out.data()[0] = static_cast<float>(acc);
  if (track) {
    tape->record([x, out, n]() {
      const float g = out.grad()[0];
      float* dx = x.grad();
      for (i64 i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

// Row softmax of a score matrix (n, classes, 1,1,1); inference helper, not
// taped. Computed with max subtraction in double.
inline Tensor softmax(const Tensor& scores) {
  const Shape5 xs = scores.shape();
  check(xs.t == 1 && xs.h == 1 && xs.w == 1,
        "softmax: expected (n,classes,1,1,1), got " + xs.str());
  Tensor out(xs);
  const i64 N = xs.n, C = xs.c;
  for (i64 i = 0; i < N; ++i) {
    const float* row = scores.data() + i * C;
    float* orow = out.data() + i * C;
    double m = row[0];
    for (i64 j = 1; j < C; ++j) m = std::max(m, double(row[j]));
    double se = 0.0;
    for (i64 j = 0; j < C; ++j) se += std::exp(double(row[j]) - m);
    for (i64 j = 0; j < C; ++j)
      orow[j] = static_cast<float>(std::exp(double(row[j]) - m) / se);
  }
  return out;
}

// Mean over the batch of -log softmax(scores)[label], max-subtracted for
// stability. Gradient is (softmax - onehot)/n.
inline Tensor softmax_cross_entropy(const Tensor& scores,
                                    const std::vector<i64>& labels,
                                    Tape* tape = nullptr) {
  const Shape5 xs = scores.shape();
  check(xs.t == 1 && xs.h == 1 && xs.w == 1,
        "softmax_cross_entropy: expected (n,classes,1,1,1), got " + xs.str());
  const i64 N = xs.n, C = xs.c;
  check(static_cast<i64>(labels.size()) == N,
        "softmax_cross_entropy: " + std::to_string(labels.size()) +
            " labels for batch of " + std::to_string(N));
  check(N > 0, "softmax_cross_entropy: empty batch");
  for (i64 i = 0; i < N; ++i) {
    check(labels[i] >= 0 && labels[i] < C,
          "softmax_cross_entropy: label " + std::to_string(labels[i]) +
              " out of range [0," + std::to_string(C) + ") at row " +
              std::to_string(i));
  }
  const bool track = tape && scores.requires_grad();
  Tensor out(Shape5{1, 1, 1, 1, 1}, track);
  double total = 0.0;
  for (i64 i = 0; i < N; ++i) {
    const float* row = scores.data() + i * C;
    double m = row[0];
    for (i64 j = 1; j < C; ++j) m = std::max(m, double(row[j]));
    double se = 0.0;
    for (i64 j = 0; j < C; ++j) se += std::exp(double(row[j]) - m);
    total += std::log(se) - (double(row[labels[i]]) - m);
  }
  out.data()[0] = static_cast<float>(total / N);
  if (track) {
    tape->record([scores, out, labels, N, C]() {
      const float g = out.grad()[0];
      float* dx = scores.grad();
      for (i64 i = 0; i < N; ++i) {
        const float* row = scores.data() + i * C;
        double m = row[0];
        for (i64 j = 1; j < C; ++j) m = std::max(m, double(row[j]));
        double se = 0.0;
        for (i64 j = 0; j < C; ++j) se += std::exp(double(row[j]) - m);
        for (i64 j = 0; j < C; ++j) {
          const double p = std::exp(double(row[j]) - m) / se;
          const double onehot = (j == labels[i]) ? 1.0 : 0.0;
          dx[i * C + j] += static_cast<float>(g * (p - onehot) / N);
        }
      }
    });
  }
  return out;
}

// Parameter-free shortcut: spatio-temporal subsampling (1x1x1 window with the
// block stride) followed by zero padding of the channel dimension.
inline Tensor subsample_pad_channels(const Tensor& x, i64 out_ch, Dims3 stride,
                                     Tape* tape = nullptr) {
  const Shape5 xs = x.shape();
  check(out_ch >= xs.c, "shortcut: out_ch " + std::to_string(out_ch) +
                            " < in_ch " + std::to_string(xs.c));
  const Shape5 os{xs.n, out_ch, (xs.t - 1) / stride.t + 1,
                  (xs.h - 1) / stride.h + 1, (xs.w - 1) / stride.w + 1};
  const bool track = tape && x.requires_grad();
  Tensor out(os, track);  // zero-initialized; only the first xs.c channels fill
  for (i64 b = 0; b < xs.n; ++b) {
    for (i64 c = 0; c < xs.c; ++c) {
      for (i64 t = 0; t < os.t; ++t) {
        for (i64 h = 0; h < os.h; ++h) {
          const float* src =
              x.data() + x.index(b, c, t * stride.t, h * stride.h, 0);
          float* dst = out.data() + out.index(b, c, t, h, 0);
          for (i64 w = 0; w < os.w; ++w) dst[w] = src[w * stride.w];
        }
      }
    }
  }
  if (track) {
    tape->record([x, out, xs, os, stride]() {
      const float* dy = out.grad();
      float* dx = x.grad();
      for (i64 b = 0; b < xs.n; ++b) {
        for (i64 c = 0; c < xs.c; ++c) {
          for (i64 t = 0; t < os.t; ++t) {
            for (i64 h = 0; h < os.h; ++h) {
              const float* src = dy + out.index(b, c, t, h, 0);
              float* dst =
                  dx + x.index(b, c, t * stride.t, h * stride.h, 0);
              for (i64 w = 0; w < os.w; ++w) dst[w * stride.w] += src[w];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace st3d
