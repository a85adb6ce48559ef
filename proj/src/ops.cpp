#include "mddn/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mddn/branch_trace.hpp"
#include "mddn/linalg.hpp"

namespace mddn::ops {

namespace {

void require_4d(const Shape& s, const char* who) {
  if (s.size() != 4) throw InputError(std::string(who) + ": expected NCHW, got " + shape_str(s));
}

// Source index along one axis, or -1 for a zero-padded tap.
inline long long tap_index(long long pos, std::size_t n, Padding padding) {
  if (pos >= 0 && pos < static_cast<long long>(n)) return pos;
  if (padding == Padding::zeros) return -1;
  return pos < 0 ? 0 : static_cast<long long>(n) - 1;
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvSpec& spec) {
  const long long span = static_cast<long long>(spec.dilation * (kernel - 1) + 1);
  const long long padded = static_cast<long long>(in + 2 * spec.pad);
  if (spec.stride == 0 || spec.dilation == 0) throw InputError("conv2d: stride/dilation must be >= 1");
  if (padded < span) throw InputError("conv2d: kernel larger than padded input");
  return static_cast<std::size_t>((padded - span) / static_cast<long long>(spec.stride) + 1);
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvSpec& spec, T* cols) {
  const std::size_t OH = conv_out_extent(H, k, spec), OW = conv_out_extent(W, k, spec);
  const long long pad = static_cast<long long>(spec.pad);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const long long ih = tap_index(
              static_cast<long long>(oh * spec.stride + ky * spec.dilation) - pad, H, spec.padding);
          T* out = row + oh * OW;
          if (ih < 0) {
            std::fill(out, out + OW, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const long long iw = tap_index(
                static_cast<long long>(ow * spec.stride + kx * spec.dilation) - pad, W, spec.padding);
            out[ow] = iw < 0 ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvSpec& spec, T* dx) {
  const std::size_t OH = conv_out_extent(H, k, spec), OW = conv_out_extent(W, k, spec);
  const long long pad = static_cast<long long>(spec.pad);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const long long ih = tap_index(
              static_cast<long long>(oh * spec.stride + ky * spec.dilation) - pad, H, spec.padding);
          if (ih < 0) continue;
          T* dst = dx + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* in = row + oh * OW;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const long long iw = tap_index(
                static_cast<long long>(ow * spec.stride + kx * spec.dilation) - pad, W, spec.padding);
            if (iw >= 0) dst[iw] += in[ow];
          }
        }
      }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& spec) {
  require_4d(x.shape(), "conv2d input");
  require_4d(w.shape(), "conv2d weight");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Ci || w.dim(3) != k)
    throw InputError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (!b.empty() && b.numel() != Co) throw InputError("conv2d: bias length mismatch");
  const std::size_t OH = conv_out_extent(H, k, spec), OW = conv_out_extent(W, k, spec);
  const std::size_t K = Ci * k * k, P = OH * OW;

  Tensor<T> y({N, Co, OH, OW});
  std::vector<T> cols(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * Ci * H * W;
    T* yn = y.data() + n * Co * P;
    if (k == 1 && spec.stride == 1 && spec.pad == 0) {
      linalg::gemm_nn(Co, P, K, w.data(), xn, yn, false);
    } else {
      im2col(xn, Ci, H, W, k, spec, cols.data());
      linalg::gemm_nn(Co, P, K, w.data(), cols.data(), yn, false);
    }
    if (!b.empty())
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t p = 0; p < P; ++p) yn[o * P + p] += b[o];
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                             const Tensor<T>& dy, const ConvSpec& spec) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  const std::size_t OH = conv_out_extent(H, k, spec), OW = conv_out_extent(W, k, spec);
  if (dy.shape() != Shape{N, Co, OH, OW}) throw InputError("conv2d_backward: cotangent shape");
  const std::size_t K = Ci * k * k, P = OH * OW;
  const bool pointwise = k == 1 && spec.stride == 1 && spec.pad == 0;

  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()),
                 has_bias ? Tensor<T>({Co}) : Tensor<T>()};
  std::vector<T> cols(K * P), dcols(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * Ci * H * W;
    const T* dyn = dy.data() + n * Co * P;
    T* dxn = g.dx.data() + n * Ci * H * W;
    if (pointwise) {
      linalg::gemm_nt(Co, K, P, dyn, xn, g.dw.data(), true);
      linalg::gemm_tn(K, P, Co, w.data(), dyn, dxn, true);
    } else {
      im2col(xn, Ci, H, W, k, spec, cols.data());
      linalg::gemm_nt(Co, K, P, dyn, cols.data(), g.dw.data(), true);
      linalg::gemm_tn(K, P, Co, w.data(), dyn, dcols.data(), false);
      col2im(dcols.data(), Ci, H, W, k, spec, dxn);
    }
    if (has_bias)
      for (std::size_t o = 0; o < Co; ++o) {
        T s = 0;
        for (std::size_t p = 0; p < P; ++p) s += dyn[o * P + p];
        g.db[o] += s;
      }
  }
  return g;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw InputError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> y({a.dim(0), b.dim(1)});
  linalg::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), y.data(), false);
  return y;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy) {
  const std::size_t M = a.dim(0), K = a.dim(1), P = b.dim(1);
  if (dy.shape() != Shape{M, P}) throw InputError("matmul_backward: cotangent shape");
  MatmulGrads<T> g{Tensor<T>(a.shape()), Tensor<T>(b.shape())};
  linalg::gemm_nt(M, K, P, dy.data(), b.data(), g.da.data(), false);
  linalg::gemm_tn(K, P, M, a.data(), dy.data(), g.db.data(), false);
  return g;
}

namespace {

struct AxisLayout {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw InputError("softmax: axis out of range");
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  l.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      T m = x[base];
      for (std::size_t j = 1; j < l.len; ++j) m = std::max(m, x[base + j * l.inner]);
      T s = 0;
      for (std::size_t j = 0; j < l.len; ++j) {
        const T e = std::exp(x[base + j * l.inner] - m);
        y[base + j * l.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < l.len; ++j) y[base + j * l.inner] /= s;
    }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis) {
  y.require_same_shape(dy, "softmax_backward");
  const AxisLayout l = axis_layout(y.shape(), axis);
  Tensor<T> dx(y.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      T dot = 0;
      for (std::size_t j = 0; j < l.len; ++j) dot += y[base + j * l.inner] * dy[base + j * l.inner];
      for (std::size_t j = 0; j < l.len; ++j) {
        const std::size_t at = base + j * l.inner;
        dx[at] = y[at] * (dy[at] - dot);
      }
    }
  return dx;
}

namespace {

template <typename T>
inline T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
inline T gelu_slope(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  const T slope = static_cast<T>(kLeakySlope);
  if (kind == Activation::leaky_relu) {
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] >= T(0) ? x[i] : slope * x[i];
    if (trace::enabled)
      for (std::size_t i = 0; i < x.numel(); ++i) trace::mix(x[i] >= T(0));
  } else {
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = gelu_value(x[i]);
  }
  return y;
}

template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& dy, Activation kind) {
  x.require_same_shape(dy, "activation_backward");
  Tensor<T> dx(x.shape());
  const T slope = static_cast<T>(kLeakySlope);
  if (kind == Activation::leaky_relu) {
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] >= T(0) ? dy[i] : slope * dy[i];
  } else {
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = gelu_slope(x[i]) * dy[i];
  }
  return dx;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require_4d(x.shape(), "layer_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (C == 0) throw InputError("layer_norm: no channels");
  if (gamma.numel() != C || beta.numel() != C) throw InputError("layer_norm: affine size");
  Tensor<T> y(x.shape());
  const T eps = static_cast<T>(kLayerNormEps);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * C * P;
    T* yn = y.data() + n * C * P;
    for (std::size_t p = 0; p < P; ++p) {
      T mean = 0;
      for (std::size_t c = 0; c < C; ++c) mean += xn[c * P + p];
      mean /= T(C);
      T var = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T d = xn[c * P + p] - mean;
        var += d * d;
      }
      var /= T(C);
      const T inv = T(1) / std::sqrt(var + eps);
      for (std::size_t c = 0; c < C; ++c)
        yn[c * P + p] = (xn[c * P + p] - mean) * inv * gamma[c] + beta[c];
    }
  }
  return y;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& dy) {
  x.require_same_shape(dy, "layer_norm_backward");
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  const T eps = static_cast<T>(kLayerNormEps);
  std::vector<T> xhat(C);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * C * P;
    const T* dyn = dy.data() + n * C * P;
    T* dxn = g.dx.data() + n * C * P;
    for (std::size_t p = 0; p < P; ++p) {
      T mean = 0;
      for (std::size_t c = 0; c < C; ++c) mean += xn[c * P + p];
      mean /= T(C);
      T var = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T d = xn[c * P + p] - mean;
        var += d * d;
      }
      var /= T(C);
      const T inv = T(1) / std::sqrt(var + eps);
      T sum_g = 0, sum_gx = 0;
      for (std::size_t c = 0; c < C; ++c) {
        xhat[c] = (xn[c * P + p] - mean) * inv;
        const T gc = dyn[c * P + p] * gamma[c];
        sum_g += gc;
        sum_gx += gc * xhat[c];
        g.dgamma[c] += dyn[c * P + p] * xhat[c];
        g.dbeta[c] += dyn[c * P + p];
      }
      for (std::size_t c = 0; c < C; ++c) {
        const T gc = dyn[c * P + p] * gamma[c];
        dxn[c * P + p] = inv * (gc - sum_g / T(C) - xhat[c] * sum_gx / T(C));
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t s) {
  require_4d(x.shape(), "pixel_shuffle");
  if (s == 0 || x.dim(1) % (s * s) != 0)
    throw InputError("pixel_shuffle: channels " + std::to_string(x.dim(1)) +
                     " not divisible by " + std::to_string(s * s));
  const std::size_t N = x.dim(0), C = x.dim(1) / (s * s), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, H * s, W * s});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
              y.at(n, c, h * s + i, w * s + j) = x.at(n, c * s * s + i * s + j, h, w);
  return y;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t s) {
  require_4d(x.shape(), "pixel_unshuffle");
  if (s == 0 || x.dim(2) % s != 0 || x.dim(3) % s != 0)
    throw InputError("pixel_unshuffle: spatial size not divisible by factor");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2) / s, W = x.dim(3) / s;
  Tensor<T> y({N, C * s * s, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
              y.at(n, c * s * s + i * s + j, h, w) = x.at(n, c, h * s + i, w * s + j);
  return y;
}

std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  long long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long long>(n) ? m : period - m);
}

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t pad_bottom, std::size_t pad_right) {
  require_4d(x.shape(), "pad_reflect");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, H + pad_bottom, W + pad_right});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H + pad_bottom; ++h)
        for (std::size_t w = 0; w < W + pad_right; ++w)
          y.at(n, c, h, w) = x.at(n, c, reflect_index(static_cast<long long>(h), H),
                                  reflect_index(static_cast<long long>(w), W));
  return y;
}

template <typename T>
Tensor<T> pad_reflect_backward(const Tensor<T>& dy, std::size_t H, std::size_t W) {
  const std::size_t N = dy.dim(0), C = dy.dim(1), PH = dy.dim(2), PW = dy.dim(3);
  Tensor<T> dx({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < PH; ++h)
        for (std::size_t w = 0; w < PW; ++w)
          dx.at(n, c, reflect_index(static_cast<long long>(h), H),
                reflect_index(static_cast<long long>(w), W)) += dy.at(n, c, h, w);
  return dx;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t H, std::size_t W) {
  require_4d(x.shape(), "crop");
  if (H > x.dim(2) || W > x.dim(3)) throw InputError("crop: target larger than input");
  Tensor<T> y({x.dim(0), x.dim(1), H, W});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) y.at(n, c, h, w) = x.at(n, c, h, w);
  return y;
}

#define MDDN_INSTANTIATE(T)                                                                   \
  template void im2col<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          const ConvSpec&, T*);                                               \
  template void col2im<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          const ConvSpec&, T*);                                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                               const ConvSpec&);                                              \
  template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, bool,         \
                                           const Tensor<T>&, const ConvSpec&);                \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template MatmulGrads<T> matmul_backward<T>(const Tensor<T>&, const Tensor<T>&,             \
                                             const Tensor<T>&);                               \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> softmax_backward<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);   \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);                            \
  template Tensor<T> activation_backward<T>(const Tensor<T>&, const Tensor<T>&, Activation); \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template LayerNormGrads<T> layer_norm_backward<T>(const Tensor<T>&, const Tensor<T>&,      \
                                                    const Tensor<T>&);                        \
  template Tensor<T> pixel_shuffle<T>(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> pixel_unshuffle<T>(const Tensor<T>&, std::size_t);                      \
  template Tensor<T> pad_reflect<T>(const Tensor<T>&, std::size_t, std::size_t);             \
  template Tensor<T> pad_reflect_backward<T>(const Tensor<T>&, std::size_t, std::size_t);    \
  template Tensor<T> crop<T>(const Tensor<T>&, std::size_t, std::size_t);

MDDN_INSTANTIATE(float)
MDDN_INSTANTIATE(double)
MDDN_INSTANTIATE(long double)

}  // namespace mddn::ops
