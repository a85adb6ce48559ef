#pragma once

// Differentiable dense operations. Every forward has a matching backward that
// returns the vector-Jacobian product for a given output cotangent.

#include <cstddef>

#include "mddn/tensor.hpp"

namespace mddn::ops {

// ---- convolution -----------------------------------------------------------

enum class Padding { zeros, replicate };

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
  Padding padding = Padding::zeros;

  // Same-size output for an odd kernel at stride 1.
  static ConvSpec same(std::size_t kernel, std::size_t dilation = 1,
                       Padding padding = Padding::zeros) {
    return {1, dilation * (kernel - 1) / 2, dilation, padding};
  }
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvSpec& spec);

// Unrolls one batch item x[C,H,W] into columns[C*k*k, OH*OW].
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvSpec& spec, T* cols);

// Adds columns back into dx[C,H,W] (adjoint of im2col).
template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvSpec& spec, T* dx);

// x: N x Ci x H x W, w: Co x Ci x k x k, b: Co or empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& spec);

template <typename T>
struct ConvGrads {
  Tensor<T> dx, dw, db;
};

// db is empty when has_bias is false.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, bool has_bias,
                             const Tensor<T>& dy, const ConvSpec& spec);

// ---- dense algebra -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct MatmulGrads {
  Tensor<T> da, db;
};

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy);

// ---- normalisation / nonlinearity ------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Takes the forward *output* y.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis);

enum class Activation { leaky_relu, gelu };

inline constexpr double kLeakySlope = 0.1;

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& dy, Activation kind);

inline constexpr double kLayerNormEps = 1e-6;

// Normalises each (n, h, w) position across channels of an NCHW tensor.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

template <typename T>
struct LayerNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const Tensor<T>& dy);

// ---- rearrangement ---------------------------------------------------------

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t s);

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t s);

// Backward of pixel_shuffle is pixel_unshuffle and vice versa.
template <typename T>
Tensor<T> pixel_shuffle_backward(const Tensor<T>& dy, std::size_t s) {
  return pixel_unshuffle(dy, s);
}

// Mirror index into [0, n) for any integer i (repeats the reflection as needed).
std::size_t reflect_index(long long i, std::size_t n);

// Pads the bottom/right of an NCHW tensor by reflection.
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t pad_bottom, std::size_t pad_right);

template <typename T>
Tensor<T> pad_reflect_backward(const Tensor<T>& dy, std::size_t H, std::size_t W);

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t H, std::size_t W);

}  // namespace mddn::ops
