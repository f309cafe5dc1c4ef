// Forward/adjoint kernels over TensorT. Layout conventions:
//   images / feature maps  {H, W, C}
//   conv weights           {kh, kw, Cin, Cout}, bias {Cout}
//   dense maps             x {N, Din}, w {Din, Dout}, b {Dout}
// Long reductions accumulate in double so results do not depend on how
// work is split and equality assertions stay meaningful.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "ctxdet/tensor.hpp"

namespace ctxdet::kernels {

struct Conv2dAttrs {
  int stride = 1;
  int pad = 0;
};

struct GridPoolAttrs {
  int s = 1;
};

struct AttentionAttrs {
  int heads = 1;
};

struct BilinearAttrs {
  // (x, y) sample points in feature-grid units, clamped to the map.
  std::vector<std::array<double, 2>> coords;
};

struct DepthToSpaceAttrs {
  int r = 2;
};

struct ConcatAttrs {
  int axis = 0;
};

struct UpsampleAttrs {
  int out_h = 1, out_w = 1;
};

struct GatherAttrs {
  std::vector<int> rows;
};

struct ReshapeAttrs {
  std::vector<int> shape;
};

struct ScaleAttrs {
  double alpha = 1.0;
};

struct XentAttrs {
  std::vector<int> targets;      // one per row
  std::vector<double> weights;   // one per row
  double divisor = 1.0;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw IoError("shape error: " + msg);
}

// Maps output row i of a nearest upsample back to the grid_pool cell that
// covers it: the inverse of the half-open partition [u*h/s, (u+1)*h/s).
inline int pool_cell_of(int i, int full, int s) { return ((i + 1) * s - 1) / full; }

// ---- elementwise ----

template <typename T, typename F>
TensorT<T> map_unary(const TensorT<T>& x, F f) {
  TensorT<T> y = x;
  for (auto& v : y.data) v = f(v);
  return y;
}

template <typename T>
TensorT<T> relu_fwd(const TensorT<T>& x) {
  return map_unary(x, [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
void relu_bwd(const TensorT<T>& x, const TensorT<T>& gy, TensorT<T>& gx) {
  for (int64_t i = 0; i < x.numel(); ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
}

template <typename T>
TensorT<T> gelu_fwd(const TensorT<T>& x) {
  return map_unary(x, [](T v) {
    double d = static_cast<double>(v);
    return static_cast<T>(0.5 * d * (1.0 + std::erf(d * 0.7071067811865476)));
  });
}

template <typename T>
void gelu_bwd(const TensorT<T>& x, const TensorT<T>& gy, TensorT<T>& gx) {
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = static_cast<double>(x[i]);
    double cdf = 0.5 * (1.0 + std::erf(d * 0.7071067811865476));
    double pdf = 0.3989422804014327 * std::exp(-0.5 * d * d);
    gx[i] += static_cast<T>(static_cast<double>(gy[i]) * (cdf + d * pdf));
  }
}

template <typename T>
TensorT<T> add_fwd(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), "add operands " + shape_str(a) + " vs " + shape_str(b));
  TensorT<T> y = a;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += b[i];
  return y;
}

template <typename T>
TensorT<T> sub_fwd(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), "sub operands " + shape_str(a) + " vs " + shape_str(b));
  TensorT<T> y = a;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] -= b[i];
  return y;
}

template <typename T>
TensorT<T> mul_fwd(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), "mul operands " + shape_str(a) + " vs " + shape_str(b));
  TensorT<T> y = a;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= b[i];
  return y;
}

template <typename T>
TensorT<T> scale_fwd(const TensorT<T>& x, double alpha) {
  TensorT<T> y = x;
  for (auto& v : y.data) v = static_cast<T>(static_cast<double>(v) * alpha);
  return y;
}

// ---- reductions ----

template <typename T>
TensorT<T> sum_fwd(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T& v : x.data) acc += static_cast<double>(v);
  return TensorT<T>({1}, std::vector<T>{static_cast<T>(acc)});
}

template <typename T>
TensorT<T> mean_fwd(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T& v : x.data) acc += static_cast<double>(v);
  return TensorT<T>({1}, std::vector<T>{static_cast<T>(acc / static_cast<double>(x.numel()))});
}

// Mean over axis 0 of a {N, M} matrix -> {1, M}.
template <typename T>
TensorT<T> mean_rows_fwd(const TensorT<T>& x) {
  require(x.ndim() == 2, "mean_rows expects a matrix, got " + shape_str(x));
  int n = x.dim(0), m = x.dim(1);
  TensorT<T> y({1, m});
  for (int j = 0; j < m; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(x.at(i, j));
    y.at(0, j) = static_cast<T>(acc / n);
  }
  return y;
}

// ---- softmax / layer norm ----

// Softmax over the last axis, any rank.
template <typename T>
TensorT<T> softmax_fwd(const TensorT<T>& x) {
  require(x.ndim() >= 1, "softmax needs rank >= 1");
  int d = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / d;
  TensorT<T> y = x;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = y.data.data() + r * d;
    double mx = -1e300;
    for (int j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(p[j]));
    double z = 0.0;
    for (int j = 0; j < d; ++j) z += std::exp(static_cast<double>(p[j]) - mx);
    for (int j = 0; j < d; ++j)
      p[j] = static_cast<T>(std::exp(static_cast<double>(p[j]) - mx) / z);
  }
  return y;
}

template <typename T>
void softmax_bwd(const TensorT<T>& y, const TensorT<T>& gy, TensorT<T>& gx) {
  int d = y.dim(y.ndim() - 1);
  int64_t rows = y.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    const T* py = y.data.data() + r * d;
    const T* pg = gy.data.data() + r * d;
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(py[j]) * pg[j];
    for (int j = 0; j < d; ++j)
      gx[r * d + j] += static_cast<T>(static_cast<double>(py[j]) * (static_cast<double>(pg[j]) - dot));
  }
}

inline constexpr double kLayerNormEps = 1e-5;

// Saves per-row (mean, rstd) into stats {rows, 2}.
template <typename T>
TensorT<T> layer_norm_fwd(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                          TensorT<T>& stats) {
  int d = x.dim(x.ndim() - 1);
  require(gamma.numel() == d && beta.numel() == d, "layer_norm affine params must match last axis");
  int64_t rows = x.numel() / d;
  stats = TensorT<T>({static_cast<int>(rows), 2});
  TensorT<T> y = x;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = y.data.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += static_cast<double>(p[j]);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = static_cast<double>(p[j]) - mu;
      var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    stats.at(static_cast<int>(r), 0) = static_cast<T>(mu);
    stats.at(static_cast<int>(r), 1) = static_cast<T>(rstd);
    for (int j = 0; j < d; ++j) {
      double xh = (static_cast<double>(p[j]) - mu) * rstd;
      p[j] = static_cast<T>(xh * static_cast<double>(gamma[j]) + static_cast<double>(beta[j]));
    }
  }
  return y;
}

template <typename T>
void layer_norm_bwd(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& stats,
                    const TensorT<T>& gy, TensorT<T>& gx, TensorT<T>& ggamma, TensorT<T>& gbeta) {
  int d = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = x.data.data() + r * d;
    const T* pg = gy.data.data() + r * d;
    double mu = static_cast<double>(stats.at(static_cast<int>(r), 0));
    double rstd = static_cast<double>(stats.at(static_cast<int>(r), 1));
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < d; ++j) {
      double xh = (static_cast<double>(px[j]) - mu) * rstd;
      double dxh = static_cast<double>(pg[j]) * static_cast<double>(gamma[j]);
      m1 += dxh;
      m2 += dxh * xh;
      ggamma[j] += static_cast<T>(static_cast<double>(pg[j]) * xh);
      gbeta[j] += pg[j];
    }
    m1 /= d;
    m2 /= d;
    for (int j = 0; j < d; ++j) {
      double xh = (static_cast<double>(px[j]) - mu) * rstd;
      double dxh = static_cast<double>(pg[j]) * static_cast<double>(gamma[j]);
      gx[r * d + j] += static_cast<T>(rstd * (dxh - m1 - xh * m2));
    }
  }
}

// ---- dense / conv ----

template <typename T>
TensorT<T> linear_fwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  require(x.ndim() == 2 && w.ndim() == 2, "linear expects matrices");
  require(x.dim(1) == w.dim(0), "linear width mismatch: " + shape_str(x) + " vs " + shape_str(w));
  require(b.numel() == w.dim(1), "linear bias mismatch");
  int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  TensorT<T> y({n, dout});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < dout; ++o) {
      double acc = static_cast<double>(b[o]);
      for (int j = 0; j < din; ++j)
        acc += static_cast<double>(x.at(i, j)) * static_cast<double>(w.at(j, o));
      y.at(i, o) = static_cast<T>(acc);
    }
  return y;
}

template <typename T>
void linear_bwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& gy, TensorT<T>& gx,
                TensorT<T>& gw, TensorT<T>& gb) {
  int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < dout; ++o) {
      T g = gy.at(i, o);
      gb[o] += g;
      for (int j = 0; j < din; ++j) {
        gx.at(i, j) += w.at(j, o) * g;
        gw.at(j, o) += x.at(i, j) * g;
      }
    }
}

template <typename T>
TensorT<T> conv2d_fwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                      const Conv2dAttrs& a) {
  require(x.ndim() == 3 && w.ndim() == 4, "conv2d expects {H,W,C} input and {kh,kw,Cin,Cout} weight");
  require(x.dim(2) == w.dim(2), "conv2d channel mismatch: " + shape_str(x) + " vs " + shape_str(w));
  int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  require(b.numel() == cout, "conv2d bias mismatch");
  int oh = (h + 2 * a.pad - kh) / a.stride + 1;
  int ow = (wd + 2 * a.pad - kw) / a.stride + 1;
  require(oh > 0 && ow > 0, "conv2d output would be empty");
  TensorT<T> y({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        double acc = static_cast<double>(b[co]);
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * a.stride - a.pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * a.stride - a.pad + kx;
            if (ix < 0 || ix >= wd) continue;
            for (int ci = 0; ci < cin; ++ci)
              acc += static_cast<double>(x.at(iy, ix, ci)) * static_cast<double>(w.at(ky, kx, ci, co));
          }
        }
        y.at(oy, ox, co) = static_cast<T>(acc);
      }
  return y;
}

template <typename T>
void conv2d_bwd(const TensorT<T>& x, const TensorT<T>& w, const Conv2dAttrs& a,
                const TensorT<T>& gy, TensorT<T>& gx, TensorT<T>& gw, TensorT<T>& gb) {
  int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  int oh = gy.dim(0), ow = gy.dim(1);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        T g = gy.at(oy, ox, co);
        gb[co] += g;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * a.stride - a.pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * a.stride - a.pad + kx;
            if (ix < 0 || ix >= wd) continue;
            for (int ci = 0; ci < cin; ++ci) {
              gx.at(iy, ix, ci) += w.at(ky, kx, ci, co) * g;
              gw.at(ky, kx, ci, co) += x.at(iy, ix, ci) * g;
            }
          }
        }
      }
}

// ---- pooling / resampling ----

template <typename T>
TensorT<T> grid_pool_fwd(const TensorT<T>& x, int s) {
  require(x.ndim() == 3, "grid_pool expects {h,w,c}");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  require(s >= 1 && s <= std::min(h, w), "grid size must satisfy 1 <= s <= min(h,w)");
  TensorT<T> y({s, s, c});
  for (int u = 0; u < s; ++u) {
    int r0 = u * h / s, r1 = (u + 1) * h / s;
    for (int v = 0; v < s; ++v) {
      int c0 = v * w / s, c1 = (v + 1) * w / s;
      double area = static_cast<double>(r1 - r0) * (c1 - c0);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = r0; i < r1; ++i)
          for (int j = c0; j < c1; ++j) acc += static_cast<double>(x.at(i, j, ch));
        y.at(u, v, ch) = static_cast<T>(acc / area);
      }
    }
  }
  return y;
}

template <typename T>
void grid_pool_bwd(const TensorT<T>& x, int s, const TensorT<T>& gy, TensorT<T>& gx) {
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  for (int u = 0; u < s; ++u) {
    int r0 = u * h / s, r1 = (u + 1) * h / s;
    for (int v = 0; v < s; ++v) {
      int c0 = v * w / s, c1 = (v + 1) * w / s;
      double area = static_cast<double>(r1 - r0) * (c1 - c0);
      for (int ch = 0; ch < c; ++ch) {
        T g = static_cast<T>(static_cast<double>(gy.at(u, v, ch)) / area);
        for (int i = r0; i < r1; ++i)
          for (int j = c0; j < c1; ++j) gx.at(i, j, ch) += g;
      }
    }
  }
}

template <typename T>
TensorT<T> upsample_nearest_fwd(const TensorT<T>& x, int oh, int ow) {
  require(x.ndim() == 3, "upsample expects {s,s,c}");
  int sh = x.dim(0), sw = x.dim(1), c = x.dim(2);
  require(oh >= sh && ow >= sw, "upsample target smaller than source");
  TensorT<T> y({oh, ow, c});
  for (int i = 0; i < oh; ++i) {
    int u = pool_cell_of(i, oh, sh);
    for (int j = 0; j < ow; ++j) {
      int v = pool_cell_of(j, ow, sw);
      for (int ch = 0; ch < c; ++ch) y.at(i, j, ch) = x.at(u, v, ch);
    }
  }
  return y;
}

template <typename T>
void upsample_nearest_bwd(const TensorT<T>& x, const TensorT<T>& gy, TensorT<T>& gx) {
  int oh = gy.dim(0), ow = gy.dim(1), c = gy.dim(2);
  int sh = x.dim(0), sw = x.dim(1);
  for (int i = 0; i < oh; ++i) {
    int u = pool_cell_of(i, oh, sh);
    for (int j = 0; j < ow; ++j) {
      int v = pool_cell_of(j, ow, sw);
      for (int ch = 0; ch < c; ++ch) gx.at(u, v, ch) += gy.at(i, j, ch);
    }
  }
}

template <typename T>
TensorT<T> depth_to_space_fwd(const TensorT<T>& x, int r) {
  require(x.ndim() == 3 && x.dim(2) % (r * r) == 0, "depth_to_space needs channels divisible by r^2");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2) / (r * r);
  TensorT<T> y({h * r, w * r, c});
  for (int i = 0; i < h * r; ++i)
    for (int j = 0; j < w * r; ++j)
      for (int ch = 0; ch < c; ++ch)
        y.at(i, j, ch) = x.at(i / r, j / r, ((i % r) * r + (j % r)) * c + ch);
  return y;
}

template <typename T>
void depth_to_space_bwd(int r, const TensorT<T>& gy, TensorT<T>& gx) {
  int oh = gy.dim(0), ow = gy.dim(1), c = gy.dim(2);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      for (int ch = 0; ch < c; ++ch)
        gx.at(i / r, j / r, ((i % r) * r + (j % r)) * c + ch) += gy.at(i, j, ch);
}

template <typename T>
TensorT<T> bilinear_fwd(const TensorT<T>& x, const BilinearAttrs& a) {
  require(x.ndim() == 3, "bilinear expects {h,w,c}");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int n = static_cast<int>(a.coords.size());
  TensorT<T> y({n, c});
  for (int i = 0; i < n; ++i) {
    double fx = std::clamp(a.coords[static_cast<size_t>(i)][0], 0.0, static_cast<double>(w - 1));
    double fy = std::clamp(a.coords[static_cast<size_t>(i)][1], 0.0, static_cast<double>(h - 1));
    int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    double ax = fx - x0, ay = fy - y0;
    for (int ch = 0; ch < c; ++ch) {
      double v = (1 - ay) * ((1 - ax) * x.at(y0, x0, ch) + ax * x.at(y0, x1, ch)) +
                 ay * ((1 - ax) * x.at(y1, x0, ch) + ax * x.at(y1, x1, ch));
      y.at(i, ch) = static_cast<T>(v);
    }
  }
  return y;
}

template <typename T>
void bilinear_bwd(const TensorT<T>& x, const BilinearAttrs& a, const TensorT<T>& gy,
                  TensorT<T>& gx) {
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int n = static_cast<int>(a.coords.size());
  for (int i = 0; i < n; ++i) {
    double fx = std::clamp(a.coords[static_cast<size_t>(i)][0], 0.0, static_cast<double>(w - 1));
    double fy = std::clamp(a.coords[static_cast<size_t>(i)][1], 0.0, static_cast<double>(h - 1));
    int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    double ax = fx - x0, ay = fy - y0;
    for (int ch = 0; ch < c; ++ch) {
      double g = static_cast<double>(gy.at(i, ch));
      gx.at(y0, x0, ch) += static_cast<T>((1 - ay) * (1 - ax) * g);
      gx.at(y0, x1, ch) += static_cast<T>((1 - ay) * ax * g);
      gx.at(y1, x0, ch) += static_cast<T>(ay * (1 - ax) * g);
      gx.at(y1, x1, ch) += static_cast<T>(ay * ax * g);
    }
  }
}

// ---- attention ----

// Multi-head scaled dot-product attention over token matrices; scale is
// fixed at 1/sqrt(head_dim). Saves the attention weights for the adjoint.
template <typename T>
TensorT<T> attention_fwd(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, int heads,
                         TensorT<T>& weights) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention expects token matrices");
  require(q.dim(1) == k.dim(1) && k.same_shape(v), "attention width mismatch");
  require(q.dim(1) % heads == 0, "attention width not divisible by heads");
  int nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  weights = TensorT<T>({heads, nq, nk});
  TensorT<T> y({nq, d});
  std::vector<double> row(static_cast<size_t>(nk));
  for (int hh = 0; hh < heads; ++hh) {
    int off = hh * dh;
    for (int i = 0; i < nq; ++i) {
      double mx = -1e300;
      for (int j = 0; j < nk; ++j) {
        double acc = 0.0;
        for (int t = 0; t < dh; ++t)
          acc += static_cast<double>(q.at(i, off + t)) * static_cast<double>(k.at(j, off + t));
        row[static_cast<size_t>(j)] = acc * scale;
        mx = std::max(mx, row[static_cast<size_t>(j)]);
      }
      double z = 0.0;
      for (int j = 0; j < nk; ++j) {
        row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
        z += row[static_cast<size_t>(j)];
      }
      for (int j = 0; j < nk; ++j)
        weights.at(hh, i, j) = static_cast<T>(row[static_cast<size_t>(j)] / z);
      for (int t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (int j = 0; j < nk; ++j)
          acc += static_cast<double>(weights.at(hh, i, j)) * static_cast<double>(v.at(j, off + t));
        y.at(i, off + t) = static_cast<T>(acc);
      }
    }
  }
  return y;
}

template <typename T>
void attention_bwd(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, int heads,
                   const TensorT<T>& weights, const TensorT<T>& gy, TensorT<T>& gq, TensorT<T>& gk,
                   TensorT<T>& gv) {
  int nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> da(static_cast<size_t>(nk));
  for (int hh = 0; hh < heads; ++hh) {
    int off = hh * dh;
    for (int i = 0; i < nq; ++i) {
      double dot = 0.0;
      for (int j = 0; j < nk; ++j) {
        double acc = 0.0;
        for (int t = 0; t < dh; ++t)
          acc += static_cast<double>(gy.at(i, off + t)) * static_cast<double>(v.at(j, off + t));
        da[static_cast<size_t>(j)] = acc;
        dot += acc * static_cast<double>(weights.at(hh, i, j));
      }
      for (int j = 0; j < nk; ++j) {
        double a = static_cast<double>(weights.at(hh, i, j));
        double ds = a * (da[static_cast<size_t>(j)] - dot) * scale;
        for (int t = 0; t < dh; ++t) {
          gq.at(i, off + t) += static_cast<T>(ds * static_cast<double>(k.at(j, off + t)));
          gk.at(j, off + t) += static_cast<T>(ds * static_cast<double>(q.at(i, off + t)));
          gv.at(j, off + t) +=
              static_cast<T>(a * static_cast<double>(gy.at(i, off + t)));
        }
      }
    }
  }
}

// ---- structural ops ----

template <typename T>
TensorT<T> concat_fwd(const std::vector<const TensorT<T>*>& xs, int axis) {
  require(!xs.empty(), "concat of nothing");
  const auto& s0 = xs[0]->shape;
  require(axis >= 0 && axis < static_cast<int>(s0.size()), "concat axis out of range");
  int total = 0;
  for (const auto* x : xs) {
    require(x->ndim() == static_cast<int>(s0.size()), "concat rank mismatch");
    for (int i = 0; i < x->ndim(); ++i)
      require(i == axis || x->dim(i) == static_cast<int>(s0[static_cast<size_t>(i)]),
              "concat shape mismatch off-axis");
    total += x->dim(axis);
  }
  std::vector<int> os = s0;
  os[static_cast<size_t>(axis)] = total;
  TensorT<T> y(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
  for (int64_t o = 0; o < outer; ++o) {
    int64_t dst = o * total * inner;
    for (const auto* x : xs) {
      int64_t len = x->dim(axis) * inner;
      std::copy_n(x->data.data() + o * len, len, y.data.data() + dst);
      dst += len;
    }
  }
  return y;
}

template <typename T>
void concat_bwd(const std::vector<const TensorT<T>*>& xs, int axis, const TensorT<T>& gy,
                std::vector<TensorT<T>*>& gxs) {
  const auto& s0 = xs[0]->shape;
  int total = gy.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
  for (int64_t o = 0; o < outer; ++o) {
    int64_t src = o * total * inner;
    for (size_t xi = 0; xi < xs.size(); ++xi) {
      int64_t len = xs[xi]->dim(axis) * inner;
      if (gxs[xi])
        for (int64_t t = 0; t < len; ++t) gxs[xi]->data[static_cast<size_t>(o * len + t)] += gy.data[static_cast<size_t>(src + t)];
      src += len;
    }
  }
}

template <typename T>
TensorT<T> gather_rows_fwd(const TensorT<T>& x, const std::vector<int>& rows) {
  require(x.ndim() >= 1, "gather_rows needs rank >= 1");
  int64_t rowlen = x.numel() / x.dim(0);
  std::vector<int> os = x.shape;
  os[0] = static_cast<int>(rows.size());
  require(os[0] > 0, "gather_rows of empty index set");
  TensorT<T> y(os);
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < x.dim(0), "gather_rows index out of range");
    std::copy_n(x.data.data() + rows[i] * rowlen, rowlen, y.data.data() + static_cast<int64_t>(i) * rowlen);
  }
  return y;
}

template <typename T>
void gather_rows_bwd(const TensorT<T>& x, const std::vector<int>& rows, const TensorT<T>& gy,
                     TensorT<T>& gx) {
  int64_t rowlen = x.numel() / x.dim(0);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int64_t t = 0; t < rowlen; ++t)
      gx.data[static_cast<size_t>(rows[i] * rowlen + t)] += gy.data[static_cast<size_t>(static_cast<int64_t>(i) * rowlen + t)];
}

// ---- fused losses ----

// Weighted softmax cross-entropy over rows; returns a scalar and saves the
// row-wise probabilities for the adjoint.
template <typename T>
TensorT<T> softmax_xent_fwd(const TensorT<T>& logits, const XentAttrs& a, TensorT<T>& probs) {
  require(logits.ndim() == 2, "softmax_xent expects {N, K} logits");
  int n = logits.dim(0), kk = logits.dim(1);
  require(static_cast<int>(a.targets.size()) == n && static_cast<int>(a.weights.size()) == n,
          "softmax_xent targets/weights must match rows");
  require(a.divisor > 0, "softmax_xent divisor must be positive");
  probs = softmax_fwd(logits);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    int t = a.targets[static_cast<size_t>(i)];
    require(t >= 0 && t < kk, "softmax_xent target out of range");
    double p = std::max(static_cast<double>(probs.at(i, t)), 1e-30);
    total += -std::log(p) * a.weights[static_cast<size_t>(i)];
  }
  return TensorT<T>({1}, std::vector<T>{static_cast<T>(total / a.divisor)});
}

template <typename T>
void softmax_xent_bwd(const XentAttrs& a, const TensorT<T>& probs, const TensorT<T>& gy,
                      TensorT<T>& glogits) {
  int n = probs.dim(0), kk = probs.dim(1);
  double g = static_cast<double>(gy[0]) / a.divisor;
  for (int i = 0; i < n; ++i) {
    double wi = a.weights[static_cast<size_t>(i)] * g;
    for (int j = 0; j < kk; ++j) {
      double p = static_cast<double>(probs.at(i, j));
      double ind = (j == a.targets[static_cast<size_t>(i)]) ? 1.0 : 0.0;
      glogits.at(i, j) += static_cast<T>(wi * (p - ind));
    }
  }
}

}  // namespace ctxdet::kernels
