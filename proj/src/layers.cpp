#include "mddn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mddn/geometry.hpp"
#include "mddn/linalg.hpp"

namespace mddn::layers {

using ops::Activation;

template <typename T>
Tensor<T> distortion_tensor(const std::vector<PatchGeometry>& geometry, std::size_t N,
                            std::size_t H, std::size_t W) {
  if (geometry.empty() || (geometry.size() != 1 && geometry.size() != N))
    throw InputError("distortion_tensor: need one geometry entry or one per batch item");
  Tensor<T> d({N, 1, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    const PatchGeometry& g = geometry.size() == 1 ? geometry[0] : geometry[n];
    const std::size_t full = g.full_height ? g.full_height : H;
    const geometry::DistortionMap map = geometry::distortion_map(H, W, g.row_offset, full);
    for (std::size_t h = 0; h < H; ++h) {
      const T v = static_cast<T>(map.row(h));
      std::fill(d.data() + (n * H + h) * W, d.data() + (n * H + h + 1) * W, v);
    }
  }
  return d;
}

// ---- low-rank ---------------------------------------------------------------------

template <typename T>
Tensor<T> low_rank_compose(const Tensor<T>& a, const Tensor<T>& b, std::size_t cout,
                           std::size_t k) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1) || b.dim(0) != cout * k * k)
    throw InputError("low_rank_compose: factors " + shape_str(a.shape()) + ", " +
                     shape_str(b.shape()) + " inconsistent with Co=" + std::to_string(cout) +
                     ", k=" + std::to_string(k));
  const std::size_t cin = a.dim(0), r = a.dim(1), K = k * k;
  // wm[ci, co*K + t] = sum_r a[ci, r] b[co*K + t, r]
  std::vector<T> wm(cin * cout * K);
  linalg::gemm_nt(cin, cout * K, r, a.data(), b.data(), wm.data(), false);
  Tensor<T> w({cout, cin, k, k});
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t t = 0; t < K; ++t) w[(co * cin + ci) * K + t] = wm[ci * cout * K + co * K + t];
  return w;
}

template <typename T>
LowRankGrads<T> low_rank_compose_backward(const Tensor<T>& a, const Tensor<T>& b,
                                          const Tensor<T>& dw) {
  const std::size_t cin = a.dim(0), r = a.dim(1);
  if (dw.ndim() != 4 || dw.dim(1) != cin || dw.dim(0) * dw.dim(2) * dw.dim(3) != b.dim(0))
    throw InputError("low_rank_compose_backward: cotangent shape " + shape_str(dw.shape()));
  const std::size_t cout = dw.dim(0), K = dw.dim(2) * dw.dim(3);
  std::vector<T> dwm(cin * cout * K);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t t = 0; t < K; ++t) dwm[ci * cout * K + co * K + t] = dw[(co * cin + ci) * K + t];
  LowRankGrads<T> g{Tensor<T>(a.shape()), Tensor<T>(b.shape())};
  linalg::gemm_nn(cin, r, cout * K, dwm.data(), b.data(), g.da.data(), false);
  linalg::gemm_tn(cout * K, r, cin, dwm.data(), a.data(), g.db.data(), false);
  return g;
}

// ---- Conv2d -------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
                  bool zero_init, std::size_t dilation, bool bias)
    : w_(name + ".weight", {cout, cin, k, k}),
      has_bias_(bias),
      spec_(ops::ConvSpec::same(k, dilation)) {
  if (bias) b_ = Parameter<T>(name + ".bias", {cout});
  if (!zero_init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    fill_uniform(w_.value, rng, bound);
    if (bias) fill_uniform(b_.value, rng, bound);
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return ops::conv2d(x, w_.value, b_.value, spec_);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  ops::ConvGrads<T> g = ops::conv2d_backward(x_, w_.value, has_bias_, dy, spec_);
  w_.grad += g.dw;
  if (has_bias_) b_.grad += g.db;
  return std::move(g.dx);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out) {
  out.push_back(&w_);
  if (has_bias_) out.push_back(&b_);
}

template <typename T>
std::uint64_t Conv2d<T>::macs(std::size_t H, std::size_t W) const {
  return std::uint64_t{w_.value.numel()} * H * W;
}

// ---- LowRankProjection ---------------------------------------------------------------

template <typename T>
LowRankProjection<T>::LowRankProjection(std::string name, std::size_t cin, std::size_t cout,
                                        std::size_t k, std::size_t rank, Rng& rng, bool zero_a)
    : cin_(cin), cout_(cout), k_(k), rank_(rank),
      a_(name + ".a", {cin, rank}),
      b_(name + ".b", {cout * k * k, rank}),
      bias_(name + ".bias", {cout}) {
  if (rank == 0 || rank > std::min(cin, cout * k * k))
    throw ConfigError(name + ": rank " + std::to_string(rank) + " exceeds factor bound min(" +
                      std::to_string(cin) + ", " + std::to_string(cout * k * k) + ")");
  const double fan_in = static_cast<double>(cin * k * k);
  fill_uniform(b_.value, rng, 1.0 / std::sqrt(fan_in));
  if (!zero_a) {
    fill_uniform(a_.value, rng, std::sqrt(3.0 / static_cast<double>(rank)));
    fill_uniform(bias_.value, rng, 1.0 / std::sqrt(fan_in));
  }
}

template <typename T>
Tensor<T> LowRankProjection<T>::forward(const Tensor<T>& cols) const {
  const std::size_t K = k_ * k_;
  if (cols.ndim() != 4 || cols.dim(1) != cin_ * K)
    throw InputError("low-rank projection: columns " + shape_str(cols.shape()) + " expected " +
                     std::to_string(cin_ * K) + " channels");
  const std::size_t N = cols.dim(0), H = cols.dim(2), W = cols.dim(3), P = H * W;
  // bp[co, r*K + t] = b[co*K + t, r]
  std::vector<T> bp(cout_ * rank_ * K);
  for (std::size_t co = 0; co < cout_; ++co)
    for (std::size_t t = 0; t < K; ++t)
      for (std::size_t r = 0; r < rank_; ++r)
        bp[co * rank_ * K + r * K + t] = b_.value[(co * K + t) * rank_ + r];
  Tensor<T> y({N, cout_, H, W});
  std::vector<T> z(rank_ * K * P);
  for (std::size_t n = 0; n < N; ++n) {
    // cols_n viewed as cin x (K*P); z = a^T cols_n is rank x (K*P) == (rank*K) x P.
    linalg::gemm_tn(rank_, K * P, cin_, a_.value.data(), cols.data() + n * cin_ * K * P,
                    z.data(), false);
    T* yn = y.data() + n * cout_ * P;
    linalg::gemm_nn(cout_, P, rank_ * K, bp.data(), z.data(), yn, false);
    for (std::size_t co = 0; co < cout_; ++co)
      for (std::size_t p = 0; p < P; ++p) yn[co * P + p] += bias_.value[co];
  }
  return y;
}

template <typename T>
Tensor<T> LowRankProjection<T>::backward(const Tensor<T>& cols, const Tensor<T>& dy) {
  const std::size_t K = k_ * k_;
  const std::size_t N = cols.dim(0), H = cols.dim(2), W = cols.dim(3), P = H * W;
  if (dy.shape() != Shape{N, cout_, H, W}) throw InputError("low-rank projection: cotangent shape");
  std::vector<T> bp(cout_ * rank_ * K), dbp(cout_ * rank_ * K, T(0));
  for (std::size_t co = 0; co < cout_; ++co)
    for (std::size_t t = 0; t < K; ++t)
      for (std::size_t r = 0; r < rank_; ++r)
        bp[co * rank_ * K + r * K + t] = b_.value[(co * K + t) * rank_ + r];
  Tensor<T> dcols(cols.shape());
  std::vector<T> z(rank_ * K * P), dz(rank_ * K * P), dat(rank_ * cin_, T(0));
  for (std::size_t n = 0; n < N; ++n) {
    const T* cn = cols.data() + n * cin_ * K * P;
    const T* dyn = dy.data() + n * cout_ * P;
    linalg::gemm_tn(rank_, K * P, cin_, a_.value.data(), cn, z.data(), false);
    linalg::gemm_nt(cout_, rank_ * K, P, dyn, z.data(), dbp.data(), true);
    linalg::gemm_tn(rank_ * K, P, cout_, bp.data(), dyn, dz.data(), false);
    // d(a^T) += dz (rank x KP) * cn^T (KP x cin)
    linalg::gemm_nt(rank_, cin_, K * P, dz.data(), cn, dat.data(), true);
    linalg::gemm_nn(cin_, K * P, rank_, a_.value.data(), dz.data(), dcols.data() + n * cin_ * K * P,
                    false);
    for (std::size_t co = 0; co < cout_; ++co) {
      T s = 0;
      for (std::size_t p = 0; p < P; ++p) s += dyn[co * P + p];
      bias_.grad[co] += s;
    }
  }
  for (std::size_t ci = 0; ci < cin_; ++ci)
    for (std::size_t r = 0; r < rank_; ++r) a_.grad[ci * rank_ + r] += dat[r * cin_ + ci];
  for (std::size_t co = 0; co < cout_; ++co)
    for (std::size_t t = 0; t < K; ++t)
      for (std::size_t r = 0; r < rank_; ++r)
        b_.grad[(co * K + t) * rank_ + r] += dbp[co * rank_ * K + r * K + t];
  return dcols;
}

template <typename T>
void LowRankProjection<T>::collect(ParamList<T>& out) {
  out.push_back(&a_);
  out.push_back(&b_);
  out.push_back(&bias_);
}

template <typename T>
std::uint64_t LowRankProjection<T>::macs(std::size_t H, std::size_t W) const {
  return std::uint64_t{H} * W * rank_ * k_ * k_ * (cin_ + cout_);
}

template <typename T>
Tensor<T> LowRankProjection<T>::composed_weight() const {
  return low_rank_compose(a_.value, b_.value, cout_, k_);
}

// ---- LowRankConv ------------------------------------------------------------------------

template <typename T>
LowRankConv<T>::LowRankConv(std::string name, std::size_t cin, std::size_t cout, std::size_t k,
                            std::size_t rank, Rng& rng, bool zero_a)
    : proj_(std::move(name), cin, cout, k, rank, rng, zero_a), spec_(ops::ConvSpec::same(k)) {}

template <typename T>
Tensor<T> LowRankConv<T>::unroll(const Tensor<T>& x) const {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = proj_.kernel();
  if (C != proj_.cin()) throw InputError("low-rank conv: input channel mismatch");
  Tensor<T> cols({N, C * k * k, H, W});
  for (std::size_t n = 0; n < N; ++n)
    ops::im2col(x.data() + n * C * H * W, C, H, W, k, spec_, cols.data() + n * C * k * k * H * W);
  return cols;
}

template <typename T>
Tensor<T> LowRankConv<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return proj_.forward(unroll(x));
}

template <typename T>
Tensor<T> LowRankConv<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> dcols = proj_.backward(unroll(x_), dy);
  const std::size_t N = x_.dim(0), C = x_.dim(1), H = x_.dim(2), W = x_.dim(3);
  const std::size_t k = proj_.kernel();
  Tensor<T> dx(x_.shape());
  for (std::size_t n = 0; n < N; ++n)
    ops::col2im(dcols.data() + n * C * k * k * H * W, C, H, W, k, spec_,
                dx.data() + n * C * H * W);
  return dx;
}

// ---- offset networks -----------------------------------------------------------------

template <typename T>
OffsetNetWarp<T>::OffsetNetWarp(std::string name, std::size_t width, std::size_t rank, Rng& rng,
                                bool zero_init)
    : c1_(name + ".c1", 1, width, 3, rng),
      c2_(name + ".c2", width, width, 3, rank, rng, false),
      c3_(name + ".c3", width, 2, 3, rng, zero_init) {}

template <typename T>
sampling::OffsetField<T> OffsetNetWarp<T>::forward(const Tensor<T>& dmap) {
  h1_ = c1_.forward(dmap);
  h2_ = c2_.forward(ops::activation(h1_, Activation::leaky_relu));
  return sampling::OffsetField<T>::warp_field(
      c3_.forward(ops::activation(h2_, Activation::leaky_relu)));
}

template <typename T>
void OffsetNetWarp<T>::backward(const Tensor<T>& doffsets) {
  Tensor<T> g = ops::activation_backward(h2_, c3_.backward(doffsets), Activation::leaky_relu);
  g = ops::activation_backward(h1_, c2_.backward(g), Activation::leaky_relu);
  c1_.backward(g);
}

template <typename T>
void OffsetNetWarp<T>::collect(ParamList<T>& out) {
  c1_.collect(out);
  c2_.collect(out);
  c3_.collect(out);
}

template <typename T>
std::uint64_t OffsetNetWarp<T>::macs(std::size_t H, std::size_t W) const {
  return c1_.macs(H, W) + c2_.macs(H, W) + c3_.macs(H, W);
}

template <typename T>
OffsetNetKernel<T>::OffsetNetKernel(std::string name, std::size_t width, std::size_t rank,
                                    Rng& rng, bool zero_init)
    : c1_(name + ".c1", 1, width, 3, rng),
      c2_(name + ".c2", width, 2 * kKernel * kKernel, 3, rank, rng, zero_init) {}

template <typename T>
sampling::OffsetField<T> OffsetNetKernel<T>::forward(const Tensor<T>& dmap) {
  h1_ = c1_.forward(dmap);
  return sampling::OffsetField<T>::kernel_field(
      c2_.forward(ops::activation(h1_, Activation::leaky_relu)), kKernel);
}

template <typename T>
void OffsetNetKernel<T>::backward(const Tensor<T>& doffsets) {
  c1_.backward(ops::activation_backward(h1_, c2_.backward(doffsets), Activation::leaky_relu));
}

template <typename T>
void OffsetNetKernel<T>::collect(ParamList<T>& out) {
  c1_.collect(out);
  c2_.collect(out);
}

template <typename T>
std::uint64_t OffsetNetKernel<T>::macs(std::size_t H, std::size_t W) const {
  return c1_.macs(H, W) + c2_.macs(H, W);
}

// ---- DeformConv ---------------------------------------------------------------------

template <typename T>
DeformConv<T>::DeformConv(std::string name, std::size_t channels, std::size_t dilation,
                          std::size_t rank, std::size_t offset_width, Rng& rng, bool zero_init)
    : dilation_(dilation),
      onet_(name + ".offset", offset_width, rank, rng, zero_init),
      proj_(name + ".weight", channels, channels, OffsetNetKernel<T>::kKernel, rank, rng,
            zero_init) {
  if (dilation == 0) throw ConfigError(name + ": dilation must be >= 1");
}

template <typename T>
Tensor<T> DeformConv<T>::forward(const Tensor<T>& f, const Tensor<T>& dmap) {
  offsets_ = onet_.forward(dmap);
  f_ = f;
  return proj_.forward(sampling::deform_gather(f, offsets_, dilation_));
}

template <typename T>
Tensor<T> DeformConv<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> cols = sampling::deform_gather(f_, offsets_, dilation_);
  const Tensor<T> dcols = proj_.backward(cols, dy);
  sampling::GatherGrads<T> g = sampling::deform_gather_backward(f_, offsets_, dilation_, dcols);
  onet_.backward(g.doffsets);
  return std::move(g.df);
}

template <typename T>
void DeformConv<T>::collect(ParamList<T>& out) {
  onet_.collect(out);
  proj_.collect(out);
}

template <typename T>
std::uint64_t DeformConv<T>::macs(std::size_t H, std::size_t W) const {
  const std::uint64_t K = proj_.kernel() * proj_.kernel();
  return onet_.macs(H, W) + 4 * K * proj_.cin() * H * W + proj_.macs(H, W);
}

// ---- window attention ----------------------------------------------------------------

namespace {

struct WindowLayout {
  std::size_t N, C, H, W, heads, hd, ws, L, nwy, nwx;

  WindowLayout(const Shape& s, std::size_t heads_, std::size_t window)
      : N(s[0]), C(s[1]), H(s[2]), W(s[3]), heads(heads_), hd(0), ws(window),
        L(window * window), nwy(0), nwx(0) {
    if (heads == 0 || C % heads != 0) throw ConfigError("attention: channels not divisible by heads");
    if (ws == 0 || H % ws != 0 || W % ws != 0)
      throw InputError("attention: spatial size not a multiple of the window");
    hd = C / heads;
    nwy = H / ws;
    nwx = W / ws;
  }

  // Flat offset of window-local token i, channel c.
  std::size_t at(std::size_t n, std::size_t c, std::size_t wy, std::size_t wx, std::size_t i) const {
    return ((n * C + c) * H + wy * ws + i / ws) * W + wx * ws + i % ws;
  }
  std::size_t rel_index(std::size_t i, std::size_t j) const {
    const std::size_t dy = i / ws + ws - 1 - j / ws;
    const std::size_t dx = i % ws + ws - 1 - j % ws;
    return dy * (2 * ws - 1) + dx;
  }
};

}  // namespace

template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& rel_bias, std::size_t heads, std::size_t window,
                           Tensor<T>* probs) {
  if (q.ndim() != 4) throw InputError("attention: expected NCHW");
  q.require_same_shape(k, "attention keys");
  q.require_same_shape(v, "attention values");
  const WindowLayout lay(q.shape(), heads, window);
  const std::size_t R = 2 * window - 1;
  if (rel_bias.shape() != Shape{R * R, heads}) throw InputError("attention: relative bias table shape");
  const std::size_t L = lay.L, hd = lay.hd, nwin = lay.nwy * lay.nwx;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Tensor<T> out(q.shape());
  Tensor<T> pr({lay.N, nwin, heads, L, L});
  std::vector<T> Q(L * hd), Kt(L * hd), V(L * hd);
  for (std::size_t n = 0; n < lay.N; ++n)
    for (std::size_t wy = 0; wy < lay.nwy; ++wy)
      for (std::size_t wx = 0; wx < lay.nwx; ++wx)
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < L; ++i)
            for (std::size_t d = 0; d < hd; ++d) {
              const std::size_t at = lay.at(n, h * hd + d, wy, wx, i);
              Q[i * hd + d] = q[at];
              Kt[i * hd + d] = k[at];
              V[i * hd + d] = v[at];
            }
          T* P = pr.data() + (((n * nwin) + wy * lay.nwx + wx) * heads + h) * L * L;
          for (std::size_t i = 0; i < L; ++i) {
            T* row = P + i * L;
            T m = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < L; ++j) {
              T s = 0;
              for (std::size_t d = 0; d < hd; ++d) s += Q[i * hd + d] * Kt[j * hd + d];
              row[j] = s * scale + rel_bias[lay.rel_index(i, j) * heads + h];
              m = std::max(m, row[j]);
            }
            T sum = 0;
            for (std::size_t j = 0; j < L; ++j) {
              row[j] = std::exp(row[j] - m);
              sum += row[j];
            }
            for (std::size_t j = 0; j < L; ++j) row[j] /= sum;
            for (std::size_t d = 0; d < hd; ++d) {
              T o = 0;
              for (std::size_t j = 0; j < L; ++j) o += row[j] * V[j * hd + d];
              out[lay.at(n, h * hd + d, wy, wx, i)] = o;
            }
          }
        }
  if (probs) *probs = std::move(pr);
  return out;
}

template <typename T>
AttentionGrads<T> window_attention_backward(const Tensor<T>& q, const Tensor<T>& k,
                                            const Tensor<T>& v, const Tensor<T>& probs,
                                            std::size_t heads, std::size_t window,
                                            const Tensor<T>& dy) {
  q.require_same_shape(dy, "attention cotangent");
  const WindowLayout lay(q.shape(), heads, window);
  const std::size_t R = 2 * window - 1;
  const std::size_t L = lay.L, hd = lay.hd, nwin = lay.nwy * lay.nwx;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  AttentionGrads<T> g{Tensor<T>(q.shape()), Tensor<T>(q.shape()), Tensor<T>(q.shape()),
                      Tensor<T>({R * R, heads})};
  std::vector<T> Q(L * hd), Kt(L * hd), V(L * hd), dO(L * hd), dP(L * L), dQ(L * hd),
      dK(L * hd), dV(L * hd);
  for (std::size_t n = 0; n < lay.N; ++n)
    for (std::size_t wy = 0; wy < lay.nwy; ++wy)
      for (std::size_t wx = 0; wx < lay.nwx; ++wx)
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < L; ++i)
            for (std::size_t d = 0; d < hd; ++d) {
              const std::size_t at = lay.at(n, h * hd + d, wy, wx, i);
              Q[i * hd + d] = q[at];
              Kt[i * hd + d] = k[at];
              V[i * hd + d] = v[at];
              dO[i * hd + d] = dy[at];
            }
          const T* P = probs.data() + (((n * nwin) + wy * lay.nwx + wx) * heads + h) * L * L;
          std::fill(dQ.begin(), dQ.end(), T(0));
          std::fill(dK.begin(), dK.end(), T(0));
          std::fill(dV.begin(), dV.end(), T(0));
          for (std::size_t i = 0; i < L; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < L; ++j) {
              T s = 0;
              for (std::size_t d = 0; d < hd; ++d) {
                s += dO[i * hd + d] * V[j * hd + d];
                dV[j * hd + d] += P[i * L + j] * dO[i * hd + d];
              }
              dP[i * L + j] = s;
              dot += s * P[i * L + j];
            }
            for (std::size_t j = 0; j < L; ++j) {
              const T ds = P[i * L + j] * (dP[i * L + j] - dot);
              g.drel_bias[lay.rel_index(i, j) * heads + h] += ds;
              for (std::size_t d = 0; d < hd; ++d) {
                dQ[i * hd + d] += ds * scale * Kt[j * hd + d];
                dK[j * hd + d] += ds * scale * Q[i * hd + d];
              }
            }
          }
          for (std::size_t i = 0; i < L; ++i)
            for (std::size_t d = 0; d < hd; ++d) {
              const std::size_t at = lay.at(n, h * hd + d, wy, wx, i);
              g.dq[at] = dQ[i * hd + d];
              g.dk[at] = dK[i * hd + d];
              g.dv[at] = dV[i * hd + d];
            }
        }
  return g;
}

// ---- Ddca ----------------------------------------------------------------------------

template <typename T>
Ddca<T>::Ddca(std::string name, std::size_t channels, std::size_t heads, std::size_t window,
              std::size_t rank, std::size_t offset_width, Rng& rng, bool zero_init)
    : channels_(channels), heads_(heads), window_(window),
      onet_(name + ".offset", offset_width, rank, rng, zero_init),
      q_(name + ".q", channels, channels, 1, rng),
      // A key bias shifts every score of a query row equally and cancels in the softmax.
      k_(name + ".k", channels, channels, 1, rng, false, 1, false),
      v_(name + ".v", channels, channels, 1, rng),
      o_(name + ".o", channels, channels, 1, rng, zero_init),
      rel_bias_(name + ".rel_bias", {(2 * window - 1) * (2 * window - 1), heads}) {
  if (heads == 0 || channels % heads != 0)
    throw ConfigError(name + ": channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  fill_normal(rel_bias_.value, rng, 0.02);
}

template <typename T>
Tensor<T> Ddca<T>::forward(const Tensor<T>& f, const Tensor<T>& dmap) {
  f_ = f;
  H_ = f.dim(2);
  W_ = f.dim(3);
  offsets_ = onet_.forward(dmap);
  const Tensor<T> fw = sampling::warp(f, offsets_);
  const std::size_t ph = (window_ - H_ % window_) % window_;
  const std::size_t pw = (window_ - W_ % window_) % window_;
  qp_ = ops::pad_reflect(q_.forward(f), ph, pw);
  kp_ = ops::pad_reflect(k_.forward(fw), ph, pw);
  vp_ = ops::pad_reflect(v_.forward(fw), ph, pw);
  const Tensor<T> att =
      window_attention(qp_, kp_, vp_, rel_bias_.value, heads_, window_, &probs_);
  return o_.forward(ops::crop(att, H_, W_));
}

template <typename T>
Tensor<T> Ddca<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> datt = o_.backward(dy);
  Tensor<T> datt_pad(qp_.shape());
  for (std::size_t n = 0; n < datt.dim(0); ++n)
    for (std::size_t c = 0; c < datt.dim(1); ++c)
      for (std::size_t h = 0; h < H_; ++h)
        for (std::size_t w = 0; w < W_; ++w) datt_pad.at(n, c, h, w) = datt.at(n, c, h, w);
  AttentionGrads<T> g =
      window_attention_backward(qp_, kp_, vp_, probs_, heads_, window_, datt_pad);
  rel_bias_.grad += g.drel_bias;
  Tensor<T> df = q_.backward(ops::pad_reflect_backward(g.dq, H_, W_));
  Tensor<T> dfw = k_.backward(ops::pad_reflect_backward(g.dk, H_, W_));
  dfw += v_.backward(ops::pad_reflect_backward(g.dv, H_, W_));
  sampling::WarpGrads<T> wg = sampling::warp_backward(f_, offsets_, dfw);
  df += wg.df;
  onet_.backward(wg.doffsets);
  return df;
}

template <typename T>
void Ddca<T>::collect(ParamList<T>& out) {
  onet_.collect(out);
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  o_.collect(out);
  out.push_back(&rel_bias_);
}

template <typename T>
std::uint64_t Ddca<T>::macs(std::size_t H, std::size_t W) const {
  const std::uint64_t Hp = (H + window_ - 1) / window_ * window_;
  const std::uint64_t Wp = (W + window_ - 1) / window_ * window_;
  const std::uint64_t L = window_ * window_;
  return onet_.macs(H, W) + 4ull * channels_ * H * W + q_.macs(H, W) + k_.macs(H, W) +
         v_.macs(H, W) + o_.macs(H, W) + 2ull * channels_ * L * Hp * Wp;
}

// ---- Mff -------------------------------------------------------------------------------

template <typename T>
Mff<T>::Mff(std::string name, std::size_t channels, std::size_t slots, Fusion fusion, Rng& rng,
            bool zero_init)
    : channels_(channels), slots_(slots), fusion_(fusion) {
  if (slots == 0) throw ConfigError(name + ": no fusion slots");
  if (fusion == Fusion::mff) gate_ = Conv2d<T>(name + ".gate", channels, slots, 3, rng, zero_init);
}

template <typename T>
Tensor<T> Mff<T>::forward(const Tensor<T>& f, const std::vector<Tensor<T>>& branches,
                          const std::vector<bool>& active) {
  if (branches.size() != slots_ || active.size() != slots_)
    throw InputError("mff: expected " + std::to_string(slots_) + " branch slots");
  if (std::none_of(active.begin(), active.end(), [](bool a) { return a; }))
    throw InputError("mff: no active branch");
  for (std::size_t s = 0; s < slots_; ++s)
    if (active[s]) f.require_same_shape(branches[s], "mff branch");
  branches_ = branches;
  active_ = active;
  const std::size_t N = f.dim(0), C = f.dim(1), P = f.dim(2) * f.dim(3);
  Tensor<T> y(f.shape());
  if (fusion_ == Fusion::addition) {
    for (std::size_t s = 0; s < slots_; ++s)
      if (active[s]) y += branches[s];
    return y;
  }
  // Mix with the unnormalised weights and divide once, so equal logits give
  // the plain branch mean and a single active branch passes through unchanged.
  Tensor<T> ex = gate_.forward(f);
  std::vector<T> sum(N * P, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s < slots_; ++s)
        if (active[s]) m = std::max(m, ex[(n * slots_ + s) * P + p]);
      for (std::size_t s = 0; s < slots_; ++s) {
        T& e = ex[(n * slots_ + s) * P + p];
        e = active[s] ? std::exp(e - m) : T(0);
        sum[n * P + p] += e;
      }
    }
  for (std::size_t s = 0; s < slots_; ++s) {
    if (!active[s]) continue;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p)
          y[(n * C + c) * P + p] += ex[(n * slots_ + s) * P + p] * branches[s][(n * C + c) * P + p];
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) y[(n * C + c) * P + p] /= sum[n * P + p];
  gates_ = std::move(ex);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t s = 0; s < slots_; ++s)
      for (std::size_t p = 0; p < P; ++p) gates_[(n * slots_ + s) * P + p] /= sum[n * P + p];
  return y;
}

template <typename T>
typename Mff<T>::Grads Mff<T>::backward(const Tensor<T>& dy) {
  Grads g;
  g.dbranches.resize(slots_);
  if (fusion_ == Fusion::addition) {
    for (std::size_t s = 0; s < slots_; ++s)
      if (active_[s]) g.dbranches[s] = dy;
    g.df = Tensor<T>(dy.shape());
    return g;
  }
  const std::size_t N = dy.dim(0), C = dy.dim(1), P = dy.dim(2) * dy.dim(3);
  Tensor<T> dgate(gates_.shape());
  for (std::size_t s = 0; s < slots_; ++s) {
    if (!active_[s]) continue;
    Tensor<T> db(dy.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t at = (n * C + c) * P + p;
          const T gs = gates_[(n * slots_ + s) * P + p];
          db[at] = gs * dy[at];
          dgate[(n * slots_ + s) * P + p] += dy[at] * branches_[s][at];
        }
    g.dbranches[s] = std::move(db);
  }
  Tensor<T> dlogits(gates_.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      T dot = 0;
      for (std::size_t s = 0; s < slots_; ++s)
        dot += gates_[(n * slots_ + s) * P + p] * dgate[(n * slots_ + s) * P + p];
      for (std::size_t s = 0; s < slots_; ++s) {
        const std::size_t at = (n * slots_ + s) * P + p;
        dlogits[at] = active_[s] ? gates_[at] * (dgate[at] - dot) : T(0);
      }
    }
  g.df = gate_.backward(dlogits);
  return g;
}

template <typename T>
void Mff<T>::collect(ParamList<T>& out) {
  if (fusion_ == Fusion::mff) gate_.collect(out);
}

template <typename T>
std::uint64_t Mff<T>::macs(std::size_t H, std::size_t W) const {
  const std::uint64_t mix = std::uint64_t{slots_} * channels_ * H * W;
  return fusion_ == Fusion::mff ? gate_.macs(H, W) + mix : 0;
}

// ---- LayerNorm / Ffn ------------------------------------------------------------------

template <typename T>
LayerNorm<T>::LayerNorm(std::string name, std::size_t channels)
    : gamma_(name + ".gamma", {channels}), beta_(name + ".beta", {channels}) {
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return ops::layer_norm(x, gamma_.value, beta_.value);
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& dy) {
  ops::LayerNormGrads<T> g = ops::layer_norm_backward(x_, gamma_.value, dy);
  gamma_.grad += g.dgamma;
  beta_.grad += g.dbeta;
  return std::move(g.dx);
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

template <typename T>
Ffn<T>::Ffn(std::string name, std::size_t channels, Rng& rng, bool zero_init)
    : fc1_(name + ".fc1", channels, 2 * channels, 1, rng),
      fc2_(name + ".fc2", 2 * channels, channels, 1, rng, zero_init) {}

template <typename T>
Tensor<T> Ffn<T>::forward(const Tensor<T>& x) {
  h_ = fc1_.forward(x);
  return fc2_.forward(ops::activation(h_, Activation::gelu));
}

template <typename T>
Tensor<T> Ffn<T>::backward(const Tensor<T>& dy) {
  return fc1_.backward(ops::activation_backward(h_, fc2_.backward(dy), Activation::gelu));
}

template <typename T>
void Ffn<T>::collect(ParamList<T>& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

template <typename T>
std::uint64_t Ffn<T>::macs(std::size_t H, std::size_t W) const {
  return fc1_.macs(H, W) + fc2_.macs(H, W);
}

// ---- Mddl ------------------------------------------------------------------------------

template <typename T>
Mddl<T>::Mddl(std::string name, const ModelConfig& cfg, Rng& rng)
    : branches_(cfg.branches), use_ffn_(cfg.ffn),
      ln1_(name + ".norm1", cfg.channels),
      ln2_(name + ".norm2", cfg.channels) {
  cfg.validate();
  for (int level : branches_.levels()) {
    const std::string bname = name + ".level" + std::to_string(level);
    if (level == 1)
      ddca_.emplace(bname, cfg.channels, cfg.heads, cfg.window, cfg.rank, cfg.offset_width, rng,
                    cfg.zero_init);
    else
      d4c_.emplace_back(bname, cfg.channels, static_cast<std::size_t>(level), cfg.rank,
                        cfg.offset_width, rng, cfg.zero_init);
  }
  const std::size_t n = branches_.size();
  const std::size_t slots = cfg.fusion == Fusion::mff ? std::max<std::size_t>(3, n) : n;
  mff_ = Mff<T>(name + ".fusion", cfg.channels, slots, cfg.fusion, rng, cfg.zero_init);
  active_.assign(slots, false);
  std::fill(active_.begin(), active_.begin() + static_cast<std::ptrdiff_t>(n), true);
  if (use_ffn_) ffn_ = Ffn<T>(name + ".ffn", cfg.channels, rng, cfg.zero_init);
}

template <typename T>
Tensor<T> Mddl<T>::forward(const Tensor<T>& f, const Tensor<T>& dmap) {
  const Tensor<T> u = ln1_.forward(f);
  std::vector<Tensor<T>> outs(mff_.slots());
  std::size_t slot = 0, j = 0;
  for (int level : branches_.levels())
    outs[slot++] = level == 1 ? ddca_->forward(u, dmap) : d4c_[j++].forward(u, dmap);
  Tensor<T> y = f + mff_.forward(u, outs, active_);
  if (!use_ffn_) return y;
  Tensor<T> out = ffn_.forward(ln2_.forward(y));
  out += y;
  return out;
}

template <typename T>
Tensor<T> Mddl<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dres = dy;
  if (use_ffn_) dres += ln2_.backward(ffn_.backward(dy));
  typename Mff<T>::Grads g = mff_.backward(dres);
  Tensor<T> du = std::move(g.df);
  std::size_t slot = 0, j = 0;
  for (int level : branches_.levels()) {
    const Tensor<T>& db = g.dbranches[slot++];
    du += level == 1 ? ddca_->backward(db) : d4c_[j++].backward(db);
  }
  dres += ln1_.backward(du);
  return dres;
}

template <typename T>
void Mddl<T>::collect(ParamList<T>& out) {
  ln1_.collect(out);
  if (ddca_) ddca_->collect(out);
  for (auto& d : d4c_) d.collect(out);
  mff_.collect(out);
  if (use_ffn_) {
    ln2_.collect(out);
    ffn_.collect(out);
  }
}

template <typename T>
std::uint64_t Mddl<T>::macs(std::size_t H, std::size_t W) const {
  std::uint64_t m = mff_.macs(H, W);
  if (ddca_) m += ddca_->macs(H, W);
  for (const auto& d : d4c_) m += d.macs(H, W);
  if (use_ffn_) m += ffn_.macs(H, W);
  return m;
}

// ---- Mddb ------------------------------------------------------------------------------

template <typename T>
Mddb<T>::Mddb(std::string name, const ModelConfig& cfg, Rng& rng) {
  layers_.reserve(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i)
    layers_.emplace_back(name + ".layers." + std::to_string(i), cfg, rng);
  conv_ = Conv2d<T>(name + ".conv", cfg.channels, cfg.channels, 3, rng);
  d3c_ = DeformConv<T>(name + ".d3c", cfg.channels, 1, cfg.rank, cfg.offset_width, rng,
                       cfg.zero_init);
}

template <typename T>
Tensor<T> Mddb<T>::forward(const Tensor<T>& f, const Tensor<T>& dmap) {
  Tensor<T> x = f;
  for (auto& l : layers_) x = l.forward(x, dmap);
  x = d3c_.forward(conv_.forward(x), dmap);
  if (residual_) x += f;
  return x;
}

template <typename T>
Tensor<T> Mddb<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx = conv_.backward(d3c_.backward(dy));
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) dx = it->backward(dx);
  if (residual_) dx += dy;
  return dx;
}

template <typename T>
void Mddb<T>::collect(ParamList<T>& out) {
  for (auto& l : layers_) l.collect(out);
  conv_.collect(out);
  d3c_.collect(out);
}

template <typename T>
std::uint64_t Mddb<T>::macs(std::size_t H, std::size_t W) const {
  std::uint64_t m = conv_.macs(H, W) + d3c_.macs(H, W);
  for (const auto& l : layers_) m += l.macs(H, W);
  return m;
}

#define MDDN_INSTANTIATE(T)                                                                 \
  template Tensor<T> distortion_tensor<T>(const std::vector<PatchGeometry>&, std::size_t,  \
                                          std::size_t, std::size_t);                        \
  template Tensor<T> low_rank_compose<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,  \
                                         std::size_t);                                      \
  template LowRankGrads<T> low_rank_compose_backward<T>(const Tensor<T>&, const Tensor<T>&, \
                                                        const Tensor<T>&);                  \
  template Tensor<T> window_attention<T>(const Tensor<T>&, const Tensor<T>&,               \
                                         const Tensor<T>&, const Tensor<T>&, std::size_t,  \
                                         std::size_t, Tensor<T>*);                          \
  template AttentionGrads<T> window_attention_backward<T>(                                  \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,  \
      std::size_t, const Tensor<T>&);                                                       \
  template class Conv2d<T>;                                                                 \
  template class LowRankProjection<T>;                                                      \
  template class LowRankConv<T>;                                                            \
  template class OffsetNetWarp<T>;                                                          \
  template class OffsetNetKernel<T>;                                                        \
  template class DeformConv<T>;                                                             \
  template class Ddca<T>;                                                                   \
  template class Mff<T>;                                                                    \
  template class LayerNorm<T>;                                                              \
  template class Ffn<T>;                                                                    \
  template class Mddl<T>;                                                                   \
  template class Mddb<T>;

MDDN_INSTANTIATE(float)
MDDN_INSTANTIATE(double)
MDDN_INSTANTIATE(long double)

}  // namespace mddn::layers
