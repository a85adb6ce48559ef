#pragma once

// Bilinear sampling at continuous coordinates, the primitive shared by
// distortion-guided warping and deformable convolution.
//
// Coordinates are (x, y) pixel positions. Out-of-range positions are clamped
// to [0, W-1] x [0, H-1] before interpolation (replicate border). At exactly
// integer positions the coordinate gradient is the right-sided derivative.

#include <cstddef>

#include "mddn/tensor.hpp"

namespace mddn::sampling {

enum class OffsetKind { warp, kernel };

// Per-pixel displacements in pixels, stored N x channels x H x W.
// warp: 2 channels (dx, dy). kernel: 2*k*k channels, tap-major, each tap
// contributing an (dx, dy) pair; taps are ordered row-major over the kernel.
template <typename T>
struct OffsetField {
  OffsetKind kind = OffsetKind::warp;
  std::size_t kernel = 0;  // 0 for warp fields
  Tensor<T> values;

  static OffsetField warp_field(Tensor<T> v) { return {OffsetKind::warp, 0, std::move(v)}; }
  static OffsetField kernel_field(Tensor<T> v, std::size_t k) {
    return {OffsetKind::kernel, k, std::move(v)};
  }

  // Throws InputError if the channel count does not match the kind.
  void validate() const;
};

// f: N x C x H x W; coords: N x 2 x Ho x Wo (x then y). Returns N x C x Ho x Wo.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& f, const Tensor<T>& coords);

template <typename T>
struct SampleGrads {
  Tensor<T> df, dcoords;
};

template <typename T>
SampleGrads<T> bilinear_sample_backward(const Tensor<T>& f, const Tensor<T>& coords,
                                        const Tensor<T>& dy);

// Regular grid plus offsets, then bilinear_sample.
template <typename T>
Tensor<T> warp(const Tensor<T>& f, const OffsetField<T>& offsets);

template <typename T>
struct WarpGrads {
  Tensor<T> df, doffsets;
};

template <typename T>
WarpGrads<T> warp_backward(const Tensor<T>& f, const OffsetField<T>& offsets,
                           const Tensor<T>& dy);

// Samples every kernel tap (nominal displacement dilation * (kx - k/2, ky - k/2)
// plus its offset) for every pixel. Output N x (C*k*k) x H x W with column
// channel index c*k*k + tap, the same layout as im2col.
template <typename T>
Tensor<T> deform_gather(const Tensor<T>& f, const OffsetField<T>& offsets,
                        std::size_t dilation);

template <typename T>
struct GatherGrads {
  Tensor<T> df, doffsets;
};

template <typename T>
GatherGrads<T> deform_gather_backward(const Tensor<T>& f, const OffsetField<T>& offsets,
                                      std::size_t dilation, const Tensor<T>& dcols);

}  // namespace mddn::sampling
