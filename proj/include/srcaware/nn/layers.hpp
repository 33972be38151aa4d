#pragma once

// Functional layers with hand-written backward passes. Forward functions are
// pure; backward functions accumulate into Param::grad (only for trainable
// parameters) and optionally produce the input gradient.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/nn/params.hpp"
#include "srcaware/nn/tensor.hpp"

namespace srcaware::nn {

// ---------------------------------------------------------------------------
// 3D convolution, input/output layout [channels, depth, height, width].

struct Conv3dSpec {
  int in_ch = 1;
  int out_ch = 1;
  std::array<int, 3> kernel{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{1, 1, 1};

  std::array<int, 3> out_dims(const std::array<int, 3>& in) const {
    std::array<int, 3> o{};
    for (int a = 0; a < 3; ++a) {
      o[a] = (in[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1;
      require(o[a] >= 1, "convolution output would be empty");
    }
    return o;
  }
  std::vector<int> weight_shape() const { return {out_ch, in_ch, kernel[0], kernel[1], kernel[2]}; }
  int fan_in() const { return in_ch * kernel[0] * kernel[1] * kernel[2]; }
};

namespace detail {

// Visits every (output index, input index) pair that a kernel tap connects.
// `fn(out_offset, in_offset, count, in_step)` is called once per output row segment.
template <class Fn>
void conv_rows(const Conv3dSpec& s, const std::array<int, 3>& in, const std::array<int, 3>& out, int kd, int kh,
               int kw, Fn&& fn) {
  // Valid output columns: 0 <= ow*sw - pw + kw < W
  const int sw = s.stride[2];
  int ow_lo = 0;
  while (ow_lo < out[2] && ow_lo * sw - s.pad[2] + kw < 0) ++ow_lo;
  int ow_hi = out[2];
  while (ow_hi > ow_lo && (ow_hi - 1) * sw - s.pad[2] + kw >= in[2]) --ow_hi;
  if (ow_hi <= ow_lo) return;
  for (int od = 0; od < out[0]; ++od) {
    const int id = od * s.stride[0] - s.pad[0] + kd;
    if (id < 0 || id >= in[0]) continue;
    for (int oh = 0; oh < out[1]; ++oh) {
      const int ih = oh * s.stride[1] - s.pad[1] + kh;
      if (ih < 0 || ih >= in[1]) continue;
      const std::size_t o = (static_cast<std::size_t>(od) * out[1] + oh) * out[2] + ow_lo;
      const std::size_t i =
          (static_cast<std::size_t>(id) * in[1] + ih) * in[2] + static_cast<std::size_t>(ow_lo * sw - s.pad[2] + kw);
      fn(o, i, ow_hi - ow_lo, sw);
    }
  }
}

inline std::array<int, 3> spatial(const std::vector<int>& shape) {
  require(shape.size() == 4, "expected a [C, D, H, W] tensor");
  return {shape[1], shape[2], shape[3]};
}

}  // namespace detail

template <class T>
Tensor<T> conv3d_forward(const Conv3dSpec& s, const Param<T>& w, const Param<T>& b, const Tensor<T>& x) {
  require(x.shape.size() == 4 && x.shape[0] == s.in_ch, "conv3d input channel mismatch");
  const auto in = detail::spatial(x.shape);
  const auto out = s.out_dims(in);
  Tensor<T> y({s.out_ch, out[0], out[1], out[2]});
  const std::size_t in_vol = static_cast<std::size_t>(in[0]) * in[1] * in[2];
  const std::size_t out_vol = static_cast<std::size_t>(out[0]) * out[1] * out[2];
  const int K = s.kernel[0] * s.kernel[1] * s.kernel[2];
  for (int oc = 0; oc < s.out_ch; ++oc) {
    T* yc = y.ptr() + oc * out_vol;
    std::fill(yc, yc + out_vol, b.value[static_cast<std::size_t>(oc)]);
    for (int ic = 0; ic < s.in_ch; ++ic) {
      const T* xc = x.ptr() + ic * in_vol;
      const T* wk = w.value.data() + (static_cast<std::size_t>(oc) * s.in_ch + ic) * K;
      for (int kd = 0; kd < s.kernel[0]; ++kd)
        for (int kh = 0; kh < s.kernel[1]; ++kh)
          for (int kw = 0; kw < s.kernel[2]; ++kw) {
            const T wv = wk[(kd * s.kernel[1] + kh) * s.kernel[2] + kw];
            detail::conv_rows(s, in, out, kd, kh, kw, [&](std::size_t o, std::size_t i, int n, int step) {
              T* yo = yc + o;
              const T* xi = xc + i;
              for (int t = 0; t < n; ++t) yo[t] += wv * xi[t * step];
            });
          }
    }
  }
  return y;
}

// Accumulates weight/bias gradients when trainable and returns dx when `want_dx`.
template <class T>
Tensor<T> conv3d_backward(const Conv3dSpec& s, Param<T>& w, Param<T>& b, const Tensor<T>& x, const Tensor<T>& dy,
                          bool want_dx) {
  const auto in = detail::spatial(x.shape);
  const auto out = detail::spatial(dy.shape);
  const std::size_t in_vol = static_cast<std::size_t>(in[0]) * in[1] * in[2];
  const std::size_t out_vol = static_cast<std::size_t>(out[0]) * out[1] * out[2];
  const int K = s.kernel[0] * s.kernel[1] * s.kernel[2];
  Tensor<T> dx;
  if (want_dx) dx = Tensor<T>(x.shape);
  const bool want_dw = w.trainable;
  if (!want_dx && !want_dw) return dx;
  for (int oc = 0; oc < s.out_ch; ++oc) {
    const T* dyc = dy.ptr() + oc * out_vol;
    if (b.trainable) {
      T acc{0};
      for (std::size_t i = 0; i < out_vol; ++i) acc += dyc[i];
      b.grad[static_cast<std::size_t>(oc)] += acc;
    }
    for (int ic = 0; ic < s.in_ch; ++ic) {
      const T* xc = x.ptr() + ic * in_vol;
      T* dxc = want_dx ? dx.ptr() + ic * in_vol : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(oc) * s.in_ch + ic) * K;
      for (int kd = 0; kd < s.kernel[0]; ++kd)
        for (int kh = 0; kh < s.kernel[1]; ++kh)
          for (int kw = 0; kw < s.kernel[2]; ++kw) {
            const std::size_t widx = wbase + (kd * s.kernel[1] + kh) * s.kernel[2] + kw;
            const T wv = w.value[widx];
            T gw{0};
            detail::conv_rows(s, in, out, kd, kh, kw, [&](std::size_t o, std::size_t i, int n, int step) {
              const T* g = dyc + o;
              if (want_dw) {
                const T* xi = xc + i;
                for (int t = 0; t < n; ++t) gw += g[t] * xi[t * step];
              }
              if (dxc) {
                T* di = dxc + i;
                for (int t = 0; t < n; ++t) di[t * step] += wv * g[t];
              }
            });
            if (want_dw) w.grad[widx] += gw;
          }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise activations

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) v = v > T{0} ? v : T{0};
  return y;
}

// `pre` is the activation input.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& pre, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(pre.data[i] > T{0})) dx.data[i] = T{0};
  return dx;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

// tanh-approximated GELU.
template <class T>
T gelu(T x) {
  const T u = static_cast<T>(detail::kGeluC) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
  const T u = static_cast<T>(detail::kGeluC) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = static_cast<T>(detail::kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <class T>
Tensor<T> gelu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) v = gelu(v);
  return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& pre, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= gelu_grad(pre.data[i]);
  return dx;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require(a.size() == b.size(), "tensor size mismatch in add");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

// ---------------------------------------------------------------------------
// Linear layer over rows: x [N, in] (or [in]) -> y [N, out] (or [out]).
// Weight layout [out, in].

struct LinearSpec {
  int in = 1;
  int out = 1;
};

template <class T>
Tensor<T> linear_forward(const LinearSpec& s, const Param<T>& w, const Param<T>& b, const Tensor<T>& x) {
  require(!x.shape.empty() && x.shape.back() == s.in, "linear input width mismatch");
  const std::size_t rows = x.size() / static_cast<std::size_t>(s.in);
  std::vector<int> shape = x.shape;
  shape.back() = s.out;
  Tensor<T> y(shape);
  for (std::size_t n = 0; n < rows; ++n) {
    const T* xr = x.ptr() + n * s.in;
    T* yr = y.ptr() + n * s.out;
    for (int o = 0; o < s.out; ++o) {
      const T* wr = w.value.data() + static_cast<std::size_t>(o) * s.in;
      T acc = b.value[static_cast<std::size_t>(o)];
      for (int i = 0; i < s.in; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
  return y;
}

template <class T>
Tensor<T> linear_backward(const LinearSpec& s, Param<T>& w, Param<T>& b, const Tensor<T>& x, const Tensor<T>& dy,
                          bool want_dx) {
  const std::size_t rows = x.size() / static_cast<std::size_t>(s.in);
  Tensor<T> dx;
  if (want_dx) dx = Tensor<T>(x.shape);
  for (std::size_t n = 0; n < rows; ++n) {
    const T* xr = x.ptr() + n * s.in;
    const T* gr = dy.ptr() + n * s.out;
    for (int o = 0; o < s.out; ++o) {
      const T g = gr[o];
      if (b.trainable) b.grad[static_cast<std::size_t>(o)] += g;
      if (w.trainable) {
        T* gw = w.grad.data() + static_cast<std::size_t>(o) * s.in;
        for (int i = 0; i < s.in; ++i) gw[i] += g * xr[i];
      }
      if (want_dx) {
        const T* wr = w.value.data() + static_cast<std::size_t>(o) * s.in;
        T* dxr = dx.ptr() + n * s.in;
        for (int i = 0; i < s.in; ++i) dxr[i] += g * wr[i];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension.

template <class T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> rstd;
};

template <class T>
Tensor<T> layernorm_forward(const Param<T>& gamma, const Param<T>& beta, const Tensor<T>& x, LayerNormCache<T>& cache,
                            T eps = T(1e-5)) {
  const int E = x.shape.back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(E);
  Tensor<T> y(x.shape);
  cache.xhat = Tensor<T>(x.shape);
  cache.rstd.assign(rows, T{0});
  for (std::size_t n = 0; n < rows; ++n) {
    const T* xr = x.ptr() + n * E;
    T mean{0};
    for (int i = 0; i < E; ++i) mean += xr[i];
    mean /= E;
    T var{0};
    for (int i = 0; i < E; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= E;
    const T rstd = T(1) / std::sqrt(var + eps);
    cache.rstd[n] = rstd;
    for (int i = 0; i < E; ++i) {
      const T h = (xr[i] - mean) * rstd;
      cache.xhat.data[n * E + i] = h;
      y.data[n * E + i] = h * gamma.value[static_cast<std::size_t>(i)] + beta.value[static_cast<std::size_t>(i)];
    }
  }
  return y;
}

template <class T>
Tensor<T> layernorm_backward(Param<T>& gamma, Param<T>& beta, const LayerNormCache<T>& cache, const Tensor<T>& dy) {
  const int E = dy.shape.back();
  const std::size_t rows = dy.size() / static_cast<std::size_t>(E);
  Tensor<T> dx(dy.shape);
  std::vector<T> dh(static_cast<std::size_t>(E));
  for (std::size_t n = 0; n < rows; ++n) {
    const T* g = dy.ptr() + n * E;
    const T* h = cache.xhat.ptr() + n * E;
    T sum_dh{0}, sum_dh_h{0};
    for (int i = 0; i < E; ++i) {
      if (gamma.trainable) gamma.grad[static_cast<std::size_t>(i)] += g[i] * h[i];
      if (beta.trainable) beta.grad[static_cast<std::size_t>(i)] += g[i];
      dh[static_cast<std::size_t>(i)] = g[i] * gamma.value[static_cast<std::size_t>(i)];
      sum_dh += dh[static_cast<std::size_t>(i)];
      sum_dh_h += dh[static_cast<std::size_t>(i)] * h[i];
    }
    for (int i = 0; i < E; ++i)
      dx.data[n * E + i] = cache.rstd[n] * (dh[static_cast<std::size_t>(i)] - (sum_dh + h[i] * sum_dh_h) / E);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling

// Mean over all spatial positions: [C, ...] -> [C].
template <class T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  const int C = x.shape[0];
  const std::size_t n = x.size() / static_cast<std::size_t>(C);
  Tensor<T> y({C});
  for (int c = 0; c < C; ++c) {
    T acc{0};
    const T* xc = x.ptr() + c * n;
    for (std::size_t i = 0; i < n; ++i) acc += xc[i];
    y.data[static_cast<std::size_t>(c)] = acc / static_cast<T>(n);
  }
  return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const std::vector<int>& in_shape, const Tensor<T>& dy) {
  Tensor<T> dx(in_shape);
  const int C = in_shape[0];
  const std::size_t n = dx.size() / static_cast<std::size_t>(C);
  for (int c = 0; c < C; ++c) {
    const T g = dy.data[static_cast<std::size_t>(c)] / static_cast<T>(n);
    std::fill(dx.ptr() + c * n, dx.ptr() + (c + 1) * n, g);
  }
  return dx;
}

// Max over all spatial positions: [C, ...] -> [C]; `argmax` receives the
// flat index of each channel's maximum (first occurrence).
template <class T>
Tensor<T> global_max_pool_forward(const Tensor<T>& x, std::vector<std::size_t>* argmax = nullptr) {
  const int C = x.shape[0];
  const std::size_t n = x.size() / static_cast<std::size_t>(C);
  Tensor<T> y({C});
  if (argmax) argmax->assign(static_cast<std::size_t>(C), 0);
  for (int c = 0; c < C; ++c) {
    const T* xc = x.ptr() + c * n;
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (xc[i] > xc[best]) best = i;
    y.data[static_cast<std::size_t>(c)] = xc[best];
    if (argmax) (*argmax)[static_cast<std::size_t>(c)] = c * n + best;
  }
  return y;
}

template <class T>
void global_max_pool_backward_add(Tensor<T>& dx, const std::vector<std::size_t>& argmax, const T* dy) {
  for (std::size_t c = 0; c < argmax.size(); ++c) dx.data[argmax[c]] += dy[c];
}

// Adaptive average pooling of a single-channel volume to `out` bins per axis
// (bin i covers [floor(i*In/Out), ceil((i+1)*In/Out))). Parameter-free; used as
// the fixed input stem of the experts.
template <class T, class Src>
Tensor<T> adaptive_avg_pool(std::span<const Src> src, std::array<int, 3> in, std::array<int, 3> out) {
  require(src.size() == static_cast<std::size_t>(in[0]) * in[1] * in[2], "pool input size mismatch");
  auto bins = [](int n_in, int n_out) {
    std::vector<std::pair<int, int>> b(static_cast<std::size_t>(n_out));
    for (int i = 0; i < n_out; ++i)
      b[static_cast<std::size_t>(i)] = {static_cast<int>((static_cast<long>(i) * n_in) / n_out),
                                         static_cast<int>((static_cast<long>(i + 1) * n_in + n_out - 1) / n_out)};
    return b;
  };
  const auto bd = bins(in[0], out[0]), bh = bins(in[1], out[1]), bw = bins(in[2], out[2]);
  // cols, then rows, then depth
  std::vector<double> a(static_cast<std::size_t>(in[0]) * in[1] * out[2]);
  for (int d = 0; d < in[0]; ++d)
    for (int h = 0; h < in[1]; ++h) {
      const Src* row = src.data() + (static_cast<std::size_t>(d) * in[1] + h) * in[2];
      for (int j = 0; j < out[2]; ++j) {
        const auto [lo, hi] = bw[static_cast<std::size_t>(j)];
        double acc = 0.0;
        for (int c = lo; c < hi; ++c) acc += row[c];
        a[(static_cast<std::size_t>(d) * in[1] + h) * out[2] + j] = acc / (hi - lo);
      }
    }
  std::vector<double> b(static_cast<std::size_t>(in[0]) * out[1] * out[2]);
  for (int d = 0; d < in[0]; ++d)
    for (int i = 0; i < out[1]; ++i) {
      const auto [lo, hi] = bh[static_cast<std::size_t>(i)];
      for (int j = 0; j < out[2]; ++j) {
        double acc = 0.0;
        for (int h = lo; h < hi; ++h) acc += a[(static_cast<std::size_t>(d) * in[1] + h) * out[2] + j];
        b[(static_cast<std::size_t>(d) * out[1] + i) * out[2] + j] = acc / (hi - lo);
      }
    }
  Tensor<T> y({1, out[0], out[1], out[2]});
  for (int k = 0; k < out[0]; ++k) {
    const auto [lo, hi] = bd[static_cast<std::size_t>(k)];
    for (int i = 0; i < out[1]; ++i)
      for (int j = 0; j < out[2]; ++j) {
        double acc = 0.0;
        for (int d = lo; d < hi; ++d) acc += b[(static_cast<std::size_t>(d) * out[1] + i) * out[2] + j];
        y.data[(static_cast<std::size_t>(k) * out[1] + i) * out[2] + j] = static_cast<T>(acc / (hi - lo));
      }
  }
  return y;
}

}  // namespace srcaware::nn
