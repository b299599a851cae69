#pragma once

#include <cstdint>
#include <vector>

#include "esrie/nn/tensor.hpp"

namespace esrie::nn {

inline constexpr double kLeakySlope = 0.1;

/// Weights are (out_c, in_c, kh, kw) stored as a Tensor4 with n = out_c.
template <typename T>
struct ConvParams {
  BasicTensor4<T> weight;
  std::vector<T> bias;

  int out_c() const noexcept { return weight.n(); }
  int in_c() const noexcept { return weight.c(); }
  int kh() const noexcept { return weight.h(); }
  int kw() const noexcept { return weight.w(); }
  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

  static ConvParams zeros(int out_c, int in_c, int kh, int kw) {
    return {BasicTensor4<T>(out_c, in_c, kh, kw), std::vector<T>(static_cast<std::size_t>(out_c), T{})};
  }

  template <typename U>
  ConvParams<U> cast() const {
    return {weight.template cast<U>(), std::vector<U>(bias.begin(), bias.end())};
  }
};

template <typename T>
struct ConvBackward {
  BasicTensor4<T> grad_x;  // empty when not requested
  ConvParams<T> grad;
};

// Stride-1 "same" convolution (zero padding kh/2), cross-correlation
// convention: out[o,y,x] = b[o] + sum_{c,ky,kx} w[o,c,ky,kx] in[c, y+ky-p, x+kx-p].
// Each output element sums the bias first, then taps in (c, ky, kx) order.
template <typename T>
BasicTensor4<T> conv2d_forward(const BasicTensor4<T>& x, const ConvParams<T>& p);

template <typename T>
ConvBackward<T> conv2d_backward(const BasicTensor4<T>& x, const ConvParams<T>& p, const BasicTensor4<T>& grad_out,
                                bool want_grad_x = true);

// Stride-2 transposed convolution with a 2x2 kernel:
// out[o, 2i+a, 2j+b] = b[o] + sum_c in[c,i,j] w[o,c,a,b].
template <typename T>
BasicTensor4<T> upconv2x2_forward(const BasicTensor4<T>& x, const ConvParams<T>& p);

template <typename T>
ConvBackward<T> upconv2x2_backward(const BasicTensor4<T>& x, const ConvParams<T>& p, const BasicTensor4<T>& grad_out,
                                   bool want_grad_x = true);

/// 2x2 max pooling. `argmax` receives, per output element, the flat offset of
/// the winning input inside its plane (first maximum in row-major order).
template <typename T>
BasicTensor4<T> maxpool2_forward(const BasicTensor4<T>& x, std::vector<std::uint32_t>& argmax);

template <typename T>
BasicTensor4<T> maxpool2_backward(const Shape4& input_shape, const std::vector<std::uint32_t>& argmax,
                                  const BasicTensor4<T>& grad_out);

template <typename T>
BasicTensor4<T> leaky_relu_forward(const BasicTensor4<T>& x);

template <typename T>
BasicTensor4<T> leaky_relu_backward(const BasicTensor4<T>& x, const BasicTensor4<T>& grad_out);

/// Channel concatenation [a, b].
template <typename T>
BasicTensor4<T> concat_forward(const BasicTensor4<T>& a, const BasicTensor4<T>& b);

template <typename T>
void concat_backward(const BasicTensor4<T>& grad_out, int a_channels, BasicTensor4<T>& grad_a, BasicTensor4<T>& grad_b);

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor4<T> grad;
};

/// Mean squared error and its gradient 2 (pred - target) / count.
template <typename T>
LossResult<T> l2_loss(const BasicTensor4<T>& pred, const BasicTensor4<T>& target);

}  // namespace esrie::nn
