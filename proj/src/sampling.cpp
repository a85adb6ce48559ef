#include "mddn/sampling.hpp"

#include <cmath>
#include <string>

#include "mddn/branch_trace.hpp"

namespace mddn::sampling {

namespace {

// Interpolation stencil for one continuous coordinate along one axis.
template <typename T>
struct Axis {
  std::size_t i0, i1;
  T frac;       // weight of i1
  bool active;  // false when the coordinate was clamped (zero derivative)
};

template <typename T>
inline Axis<T> axis_stencil(T pos, std::size_t n) {
  const T hi = static_cast<T>(n - 1);
  bool active = true;
  if (pos < T(0)) {
    pos = T(0);
    active = false;
  } else if (pos > hi) {
    pos = hi;
    active = false;
  }
  const T fl = std::floor(pos);
  std::size_t i0 = static_cast<std::size_t>(fl);
  if (trace::enabled) trace::mix((i0 << 1) | (active ? 0u : 1u));
  if (i0 >= n - 1) return {n - 1, n - 1, T(0), active};
  return {i0, i0 + 1, pos - fl, active};
}

template <typename T>
struct Stencil {
  Axis<T> x, y;
  std::size_t o00, o01, o10, o11;  // flat offsets within one H x W plane

  T interp(const T* plane) const {
    const T top = (T(1) - x.frac) * plane[o00] + x.frac * plane[o01];
    const T bot = (T(1) - x.frac) * plane[o10] + x.frac * plane[o11];
    return (T(1) - y.frac) * top + y.frac * bot;
  }
  T dvalue_dx(const T* plane) const {
    if (!x.active) return T(0);
    return (T(1) - y.frac) * (plane[o01] - plane[o00]) + y.frac * (plane[o11] - plane[o10]);
  }
  T dvalue_dy(const T* plane) const {
    if (!y.active) return T(0);
    const T top = (T(1) - x.frac) * plane[o00] + x.frac * plane[o01];
    const T bot = (T(1) - x.frac) * plane[o10] + x.frac * plane[o11];
    return bot - top;
  }
  void scatter(T* plane, T g) const {
    plane[o00] += (T(1) - y.frac) * (T(1) - x.frac) * g;
    plane[o01] += (T(1) - y.frac) * x.frac * g;
    plane[o10] += y.frac * (T(1) - x.frac) * g;
    plane[o11] += y.frac * x.frac * g;
  }
};

template <typename T>
inline Stencil<T> stencil(T px, T py, std::size_t H, std::size_t W) {
  Stencil<T> s{axis_stencil(px, W), axis_stencil(py, H), 0, 0, 0, 0};
  s.o00 = s.y.i0 * W + s.x.i0;
  s.o01 = s.y.i0 * W + s.x.i1;
  s.o10 = s.y.i1 * W + s.x.i0;
  s.o11 = s.y.i1 * W + s.x.i1;
  return s;
}

void require_nonempty_4d(const Shape& s, const char* who) {
  if (s.size() != 4 || shape_numel(s) == 0)
    throw InputError(std::string(who) + ": expected non-empty NCHW, got " + shape_str(s));
}

template <typename T>
void require_offsets(const Tensor<T>& f, const OffsetField<T>& off, OffsetKind kind,
                     const char* who) {
  if (off.kind != kind)
    throw InputError(std::string(who) + ": wrong offset field kind");
  off.validate();
  const Shape& s = off.values.shape();
  if (s[0] != f.dim(0) || s[2] != f.dim(2) || s[3] != f.dim(3))
    throw InputError(std::string(who) + ": offsets " + shape_str(s) +
                     " do not match features " + shape_str(f.shape()));
}

}  // namespace

template <typename T>
void OffsetField<T>::validate() const {
  if (values.ndim() != 4) throw InputError("offset field: expected NCHW");
  const std::size_t want = kind == OffsetKind::warp ? 2 : 2 * kernel * kernel;
  if (kind == OffsetKind::kernel && kernel == 0) throw InputError("offset field: kernel size 0");
  if (values.dim(1) != want)
    throw InputError("offset field: " + std::to_string(values.dim(1)) + " channels, expected " +
                     std::to_string(want));
  if (!all_finite(values)) throw InputError("offset field: non-finite offsets");
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& f, const Tensor<T>& coords) {
  require_nonempty_4d(f.shape(), "bilinear_sample");
  if (coords.ndim() != 4 || coords.dim(0) != f.dim(0) || coords.dim(1) != 2)
    throw InputError("bilinear_sample: coords must be N x 2 x Ho x Wo, got " +
                     shape_str(coords.shape()));
  const std::size_t N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  const std::size_t Ho = coords.dim(2), Wo = coords.dim(3), P = Ho * Wo;
  Tensor<T> y({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n) {
    const T* cx = coords.data() + n * 2 * P;
    const T* cy = cx + P;
    for (std::size_t p = 0; p < P; ++p) {
      const Stencil<T> s = stencil(cx[p], cy[p], H, W);
      for (std::size_t c = 0; c < C; ++c)
        y.data()[(n * C + c) * P + p] = s.interp(f.data() + (n * C + c) * H * W);
    }
  }
  return y;
}

template <typename T>
SampleGrads<T> bilinear_sample_backward(const Tensor<T>& f, const Tensor<T>& coords,
                                        const Tensor<T>& dy) {
  const std::size_t N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  const std::size_t Ho = coords.dim(2), Wo = coords.dim(3), P = Ho * Wo;
  if (dy.shape() != Shape{N, C, Ho, Wo}) throw InputError("bilinear_sample_backward: cotangent");
  SampleGrads<T> g{Tensor<T>(f.shape()), Tensor<T>(coords.shape())};
  for (std::size_t n = 0; n < N; ++n) {
    const T* cx = coords.data() + n * 2 * P;
    const T* cy = cx + P;
    T* gx = g.dcoords.data() + n * 2 * P;
    T* gy = gx + P;
    for (std::size_t p = 0; p < P; ++p) {
      const Stencil<T> s = stencil(cx[p], cy[p], H, W);
      T sx = 0, sy = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T gv = dy.data()[(n * C + c) * P + p];
        const T* plane = f.data() + (n * C + c) * H * W;
        s.scatter(g.df.data() + (n * C + c) * H * W, gv);
        sx += gv * s.dvalue_dx(plane);
        sy += gv * s.dvalue_dy(plane);
      }
      gx[p] = sx;
      gy[p] = sy;
    }
  }
  return g;
}

namespace {

template <typename T>
Tensor<T> warp_coords(const OffsetField<T>& offsets) {
  const Tensor<T>& v = offsets.values;
  const std::size_t N = v.dim(0), H = v.dim(2), W = v.dim(3);
  Tensor<T> coords(v.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        coords.at(n, 0, h, w) = static_cast<T>(w) + v.at(n, 0, h, w);
        coords.at(n, 1, h, w) = static_cast<T>(h) + v.at(n, 1, h, w);
      }
  return coords;
}

}  // namespace

template <typename T>
Tensor<T> warp(const Tensor<T>& f, const OffsetField<T>& offsets) {
  require_nonempty_4d(f.shape(), "warp");
  require_offsets(f, offsets, OffsetKind::warp, "warp");
  return bilinear_sample(f, warp_coords(offsets));
}

template <typename T>
WarpGrads<T> warp_backward(const Tensor<T>& f, const OffsetField<T>& offsets,
                           const Tensor<T>& dy) {
  require_offsets(f, offsets, OffsetKind::warp, "warp_backward");
  SampleGrads<T> g = bilinear_sample_backward(f, warp_coords(offsets), dy);
  // d coords / d offsets is the identity.
  return {std::move(g.df), std::move(g.dcoords)};
}

namespace {

template <typename T>
inline void tap_position(std::size_t t, std::size_t k, std::size_t dilation, std::size_t h,
                         std::size_t w, const T* off_x, const T* off_y, std::size_t p, T& px,
                         T& py) {
  const long long half = static_cast<long long>(k / 2);
  const long long kx = static_cast<long long>(t % k) - half;
  const long long ky = static_cast<long long>(t / k) - half;
  const long long d = static_cast<long long>(dilation);
  px = static_cast<T>(static_cast<long long>(w) + d * kx) + off_x[p];
  py = static_cast<T>(static_cast<long long>(h) + d * ky) + off_y[p];
}

}  // namespace

template <typename T>
Tensor<T> deform_gather(const Tensor<T>& f, const OffsetField<T>& offsets,
                        std::size_t dilation) {
  require_nonempty_4d(f.shape(), "deform_gather");
  require_offsets(f, offsets, OffsetKind::kernel, "deform_gather");
  if (dilation == 0) throw InputError("deform_gather: dilation must be >= 1");
  const std::size_t N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3), P = H * W;
  const std::size_t k = offsets.kernel, K = k * k;
  Tensor<T> cols({N, C * K, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < K; ++t) {
      const T* ox = offsets.values.data() + (n * 2 * K + 2 * t) * P;
      const T* oy = ox + P;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t p = h * W + w;
          T px, py;
          tap_position(t, k, dilation, h, w, ox, oy, p, px, py);
          const Stencil<T> s = stencil(px, py, H, W);
          for (std::size_t c = 0; c < C; ++c)
            cols.data()[((n * C + c) * K + t) * P + p] = s.interp(f.data() + (n * C + c) * P);
        }
    }
  return cols;
}

template <typename T>
GatherGrads<T> deform_gather_backward(const Tensor<T>& f, const OffsetField<T>& offsets,
                                      std::size_t dilation, const Tensor<T>& dcols) {
  require_offsets(f, offsets, OffsetKind::kernel, "deform_gather_backward");
  const std::size_t N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3), P = H * W;
  const std::size_t k = offsets.kernel, K = k * k;
  if (dcols.shape() != Shape{N, C * K, H, W})
    throw InputError("deform_gather_backward: cotangent shape");
  GatherGrads<T> g{Tensor<T>(f.shape()), Tensor<T>(offsets.values.shape())};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < K; ++t) {
      const T* ox = offsets.values.data() + (n * 2 * K + 2 * t) * P;
      const T* oy = ox + P;
      T* gx = g.doffsets.data() + (n * 2 * K + 2 * t) * P;
      T* gy = gx + P;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t p = h * W + w;
          T px, py;
          tap_position(t, k, dilation, h, w, ox, oy, p, px, py);
          const Stencil<T> s = stencil(px, py, H, W);
          T sx = 0, sy = 0;
          for (std::size_t c = 0; c < C; ++c) {
            const T gv = dcols.data()[((n * C + c) * K + t) * P + p];
            if (gv == T(0)) continue;
            const T* plane = f.data() + (n * C + c) * P;
            s.scatter(g.df.data() + (n * C + c) * P, gv);
            sx += gv * s.dvalue_dx(plane);
            sy += gv * s.dvalue_dy(plane);
          }
          gx[p] = sx;
          gy[p] = sy;
        }
    }
  return g;
}

#define MDDN_INSTANTIATE(T)                                                                   \
  template struct OffsetField<T>;                                                             \
  template Tensor<T> bilinear_sample<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template SampleGrads<T> bilinear_sample_backward<T>(const Tensor<T>&, const Tensor<T>&,    \
                                                      const Tensor<T>&);                      \
  template Tensor<T> warp<T>(const Tensor<T>&, const OffsetField<T>&);                       \
  template WarpGrads<T> warp_backward<T>(const Tensor<T>&, const OffsetField<T>&,            \
                                         const Tensor<T>&);                                   \
  template Tensor<T> deform_gather<T>(const Tensor<T>&, const OffsetField<T>&, std::size_t); \
  template GatherGrads<T> deform_gather_backward<T>(const Tensor<T>&, const OffsetField<T>&, \
                                                    std::size_t, const Tensor<T>&);

MDDN_INSTANTIATE(float)
MDDN_INSTANTIATE(double)
MDDN_INSTANTIATE(long double)

}  // namespace mddn::sampling
