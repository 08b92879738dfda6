#pragma once

#include <vector>

#include "ccmr/autograd.hpp"

namespace ccmr {

struct ConvGeometry {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int pad_h = 1;
  int pad_w = 1;

  static ConvGeometry same(int kernel_h, int kernel_w, int stride = 1) {
    return {kernel_h, kernel_w, stride, kernel_h / 2, kernel_w / 2};
  }
  int out_height(int h) const { return (h + 2 * pad_h - kernel_h) / stride + 1; }
  int out_width(int w) const { return (w + 2 * pad_w - kernel_w) / stride + 1; }
};

// Dense convolution. `weight` is Cout x 1 x (kh*kw*Cin) with column index
// (ky*kw + kx)*Cin + ci; `bias` is Cout x 1 x 1 or null.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, const ConvGeometry& g);

// Depth-wise k x k convolution, stride 1, zero "same" padding.
// `weight` is C x 1 x (k*k), `bias` is C x 1 x 1 or null.
template <typename Scalar>
Var<Scalar> depthwise_conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int kernel);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);
template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& x, const Tensor<Scalar>& constant);
// x * gamma per channel; gamma is C x 1 x 1.
template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& x, const Var<Scalar>& gamma);
// x * gain + shift per channel; both C x 1 x 1.
template <typename Scalar>
Var<Scalar> affine_channels(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& shift);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x);
// 1 - x
template <typename Scalar>
Var<Scalar> one_minus(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts);
template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, int begin, int count);

// Normalizes each pixel's channel vector, then applies per-channel gain/bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5));

// Bilinear resize by an integer factor with half-pixel centres and clamped
// borders. Values are multiplied by `value_scale` (use the factor for flow).
template <typename Scalar>
Var<Scalar> upsample_bilinear(const Var<Scalar>& x, int factor, Scalar value_scale = Scalar(1));

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& x);

// Scalar (1x1x1) sum of all entries.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);
// Scalar sum of x * weights (fixed).
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights);

}  // namespace ccmr
