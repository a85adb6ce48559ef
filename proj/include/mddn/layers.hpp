#pragma once

// Network building blocks. Each layer caches what its backward needs during
// forward; backward(dy) accumulates parameter gradients and returns the
// input cotangent. One backward per forward.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mddn/config.hpp"
#include "mddn/ops.hpp"
#include "mddn/parameter.hpp"
#include "mddn/sampling.hpp"

namespace mddn::layers {

// Where a batch item sits inside its full ERP image. full_height == 0 means
// the item is the whole image.
struct PatchGeometry {
  std::size_t row_offset = 0;
  std::size_t full_height = 0;
};

// N x 1 x H x W distortion weights; geometry has one entry per item or a
// single entry shared by all items.
template <typename T>
Tensor<T> distortion_tensor(const std::vector<PatchGeometry>& geometry, std::size_t N,
                            std::size_t H, std::size_t W);

// ---- low-rank weights --------------------------------------------------------

// a: Ci x r, b: (Co*k*k) x r. Returns the Co x Ci x k x k weight whose
// Ci x (Co*k*k) reshape equals a * b^T.
template <typename T>
Tensor<T> low_rank_compose(const Tensor<T>& a, const Tensor<T>& b, std::size_t cout,
                           std::size_t k);

template <typename T>
struct LowRankGrads {
  Tensor<T> da, db;
};

template <typename T>
LowRankGrads<T> low_rank_compose_backward(const Tensor<T>& a, const Tensor<T>& b,
                                          const Tensor<T>& dw);

// ---- plain convolution -------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // Same-padded, stride 1. zero_init zeroes weight and bias.
  Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
         bool zero_init = false, std::size_t dilation = 1, bool bias = true);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  Parameter<T>& weight() { return w_; }
  Parameter<T>& bias() { return b_; }
  const ops::ConvSpec& spec() const { return spec_; }

 private:
  Parameter<T> w_, b_;
  bool has_bias_ = true;
  ops::ConvSpec spec_;
  Tensor<T> x_;
};

// Factor pair (A, B) plus bias applied to unrolled columns. With cols laid
// out as N x (Ci*K) x H x W (K = k*k taps), evaluates the convolution with
// weight low_rank_compose(A, B) in factored order: z = A^T cols, y = B z + bias.
template <typename T>
class LowRankProjection {
 public:
  LowRankProjection() = default;
  // zero_a zeroes the A factor (composed weight starts at zero).
  LowRankProjection(std::string name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t rank, Rng& rng, bool zero_a);

  Tensor<T> forward(const Tensor<T>& cols) const;
  // Returns dcols; accumulates into the factor and bias gradients.
  Tensor<T> backward(const Tensor<T>& cols, const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  Tensor<T> composed_weight() const;
  std::size_t cin() const { return cin_; }
  std::size_t cout() const { return cout_; }
  std::size_t kernel() const { return k_; }
  std::size_t rank() const { return rank_; }
  Parameter<T>& a_factor() { return a_; }
  Parameter<T>& b_factor() { return b_; }
  Parameter<T>& bias() { return bias_; }

 private:
  std::size_t cin_ = 0, cout_ = 0, k_ = 0, rank_ = 0;
  Parameter<T> a_, b_, bias_;
};

// Same-padded 3x3 convolution whose weight is a low-rank factor pair.
template <typename T>
class LowRankConv {
 public:
  LowRankConv() = default;
  LowRankConv(std::string name, std::size_t cin, std::size_t cout, std::size_t k,
              std::size_t rank, Rng& rng, bool zero_a);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out) { proj_.collect(out); }
  std::uint64_t macs(std::size_t H, std::size_t W) const { return proj_.macs(H, W); }
  LowRankProjection<T>& projection() { return proj_; }

 private:
  Tensor<T> unroll(const Tensor<T>& x) const;

  LowRankProjection<T> proj_;
  ops::ConvSpec spec_;
  Tensor<T> x_;
};

// ---- offset networks ----------------------------------------------------------

// Distortion map -> 2-channel warp field:
// conv(1->w) -> lrelu -> low-rank conv(w->w) -> lrelu -> conv(w->2).
template <typename T>
class OffsetNetWarp {
 public:
  OffsetNetWarp() = default;
  OffsetNetWarp(std::string name, std::size_t width, std::size_t rank, Rng& rng, bool zero_init);

  sampling::OffsetField<T> forward(const Tensor<T>& dmap);
  void backward(const Tensor<T>& doffsets);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

 private:
  Conv2d<T> c1_;
  LowRankConv<T> c2_;
  Conv2d<T> c3_;
  Tensor<T> h1_, h2_;  // pre-activations
};

// Distortion map -> 2*k*k-channel kernel offsets:
// conv(1->w) -> lrelu -> low-rank conv(w->2k^2).
template <typename T>
class OffsetNetKernel {
 public:
  static constexpr std::size_t kKernel = 3;

  OffsetNetKernel() = default;
  OffsetNetKernel(std::string name, std::size_t width, std::size_t rank, Rng& rng,
                  bool zero_init);

  sampling::OffsetField<T> forward(const Tensor<T>& dmap);
  void backward(const Tensor<T>& doffsets);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

 private:
  Conv2d<T> c1_;
  LowRankConv<T> c2_;
  Tensor<T> h1_;
};

// ---- extractors ----------------------------------------------------------------

// Distortion-aware deformable 3x3 convolution with a low-rank weight. The
// dilation equals the extractor level (1 for the block-tail variant).
template <typename T>
class DeformConv {
 public:
  DeformConv() = default;
  DeformConv(std::string name, std::size_t channels, std::size_t dilation, std::size_t rank,
             std::size_t offset_width, Rng& rng, bool zero_init);

  Tensor<T> forward(const Tensor<T>& f, const Tensor<T>& dmap);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  std::size_t dilation() const { return dilation_; }
  const sampling::OffsetField<T>& last_offsets() const { return offsets_; }
  LowRankProjection<T>& projection() { return proj_; }

 private:
  std::size_t dilation_ = 1;
  OffsetNetKernel<T> onet_;
  LowRankProjection<T> proj_;
  Tensor<T> f_;
  sampling::OffsetField<T> offsets_;
};

// Window multi-head attention of queries against keys/values of the same
// spatial layout. q, k, v: N x C x H x W with H, W multiples of window.
// rel_bias: (2*window-1)^2 x heads. probs receives N x windows x heads x L x L
// (L = window^2).
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& rel_bias, std::size_t heads, std::size_t window,
                           Tensor<T>* probs);

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv, drel_bias;
};

template <typename T>
AttentionGrads<T> window_attention_backward(const Tensor<T>& q, const Tensor<T>& k,
                                            const Tensor<T>& v, const Tensor<T>& probs,
                                            std::size_t heads, std::size_t window,
                                            const Tensor<T>& dy);

// Distortion-aware deformable cross-attention: queries from f, keys and
// values from f warped by a distortion-driven offset field.
template <typename T>
class Ddca {
 public:
  Ddca() = default;
  Ddca(std::string name, std::size_t channels, std::size_t heads, std::size_t window,
       std::size_t rank, std::size_t offset_width, Rng& rng, bool zero_init);

  Tensor<T> forward(const Tensor<T>& f, const Tensor<T>& dmap);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  // N x windows x heads x L x L post-softmax weights of the last forward.
  const Tensor<T>& last_attention() const { return probs_; }
  const sampling::OffsetField<T>& last_offsets() const { return offsets_; }
  Conv2d<T>& query() { return q_; }
  Conv2d<T>& key() { return k_; }
  Conv2d<T>& value() { return v_; }
  Conv2d<T>& output() { return o_; }
  Parameter<T>& rel_bias() { return rel_bias_; }

 private:
  std::size_t channels_ = 0, heads_ = 1, window_ = 1;
  OffsetNetWarp<T> onet_;
  Conv2d<T> q_, k_, v_, o_;
  Parameter<T> rel_bias_;
  Tensor<T> f_, qp_, kp_, vp_, probs_;
  sampling::OffsetField<T> offsets_;
  std::size_t H_ = 0, W_ = 0;
};

// ---- fusion -----------------------------------------------------------------------

// Per-pixel softmax gating over branch outputs (or plain addition).
// Inactive slots get zero gate weight and the remaining gates renormalise.
template <typename T>
class Mff {
 public:
  Mff() = default;
  Mff(std::string name, std::size_t channels, std::size_t slots, Fusion fusion, Rng& rng,
      bool zero_init);

  // branches.size() == slots(); inactive entries may be empty tensors.
  Tensor<T> forward(const Tensor<T>& f, const std::vector<Tensor<T>>& branches,
                    const std::vector<bool>& active);

  struct Grads {
    Tensor<T> df;
    std::vector<Tensor<T>> dbranches;  // empty tensors for inactive slots
  };
  Grads backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  std::size_t slots() const { return slots_; }
  // N x slots x H x W gates of the last forward (mff fusion only).
  const Tensor<T>& last_gates() const { return gates_; }
  Conv2d<T>& gate_conv() { return gate_; }

 private:
  std::size_t channels_ = 0, slots_ = 0;
  Fusion fusion_ = Fusion::mff;
  Conv2d<T> gate_;
  std::vector<Tensor<T>> branches_;
  std::vector<bool> active_;
  Tensor<T> gates_;
};

// ---- transformer plumbing ----------------------------------------------------------

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  Parameter<T> gamma_, beta_;
  Tensor<T> x_;
};

// 1x1 conv (C->2C) -> gelu -> 1x1 conv (2C->C).
template <typename T>
class Ffn {
 public:
  Ffn() = default;
  Ffn(std::string name, std::size_t channels, Rng& rng, bool zero_init);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

 private:
  Conv2d<T> fc1_, fc2_;
  Tensor<T> h_;
};

// ---- layer and block ---------------------------------------------------------------

// Multi-level layer: pre-norm extractors (attention + deformable convs)
// fused into a residual, followed by an optional pre-norm FFN residual.
template <typename T>
class Mddl {
 public:
  Mddl() = default;
  Mddl(std::string name, const ModelConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& f, const Tensor<T>& dmap);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  Mff<T>& fusion() { return mff_; }
  std::optional<Ddca<T>>& attention() { return ddca_; }
  std::vector<DeformConv<T>>& deform_branches() { return d4c_; }

 private:
  BranchSet branches_;
  bool use_ffn_ = true;
  LayerNorm<T> ln1_, ln2_;
  std::optional<Ddca<T>> ddca_;
  std::vector<DeformConv<T>> d4c_;
  Mff<T> mff_;
  Ffn<T> ffn_;
  std::vector<bool> active_;
};

// Stack of layers, a 3x3 conv and a dilation-1 deformable conv, wrapped in a residual.
template <typename T>
class Mddb {
 public:
  Mddb() = default;
  Mddb(std::string name, const ModelConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& f, const Tensor<T>& dmap);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  // Test probe: disables the block residual connection.
  void set_residual(bool on) { residual_ = on; }
  std::vector<Mddl<T>>& layers() { return layers_; }

 private:
  std::vector<Mddl<T>> layers_;
  Conv2d<T> conv_;
  DeformConv<T> d3c_;
  bool residual_ = true;
};

}  // namespace mddn::layers
