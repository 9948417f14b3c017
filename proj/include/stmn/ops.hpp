#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "stmn/tensor.hpp"

namespace stmn {

// Stride-1 "same" convolution kernel, laid out kh x kw x Cin x Cout. No bias.
template <typename T>
struct ConvParams {
  Tensor<T> kernel;

  ConvParams() = default;
  explicit ConvParams(Tensor<T> k);

  static ConvParams zeros(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout);

  std::size_t kh() const { return kernel.dim(0); }
  std::size_t kw() const { return kernel.dim(1); }
  std::size_t in_channels() const { return kernel.dim(2); }
  std::size_t out_channels() const { return kernel.dim(3); }
  std::size_t pad_h() const { return (kh() - 1) / 2; }
  std::size_t pad_w() const { return (kw() - 1) / 2; }

  bool operator==(const ConvParams&) const = default;
};

template <typename T>
struct ConvGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_kernel;
};

// Unrolled receptive fields of a rank-3 input: (H*W) rows of kh*kw*Cin values.
// Lets several kernels that read the same input share one unrolling.
template <typename T>
struct Patches {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  std::size_t rows() const { return height * width; }
  std::size_t cols() const { return kh * kw * channels; }
};

template <typename T>
Patches<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw);

template <typename T>
Tensor<T> conv2d_patches(const Patches<T>& patches, const ConvParams<T>& p);

// grad_kernel += patches^T * grad_y
template <typename T>
void accumulate_kernel_grad(const Patches<T>& patches, const Tensor<T>& grad_y,
                            Tensor<T>& grad_kernel);

// grad_patches += grad_y * kernel^T, grad_patches sized rows x cols of the matching Patches.
template <typename T>
void accumulate_patch_grad(const Tensor<T>& grad_y, const ConvParams<T>& p,
                           std::vector<T>& grad_patches);

// Scatter-add patch gradients back to an H x W x C input gradient.
template <typename T>
Tensor<T> col2im(const std::vector<T>& grad_patches, std::size_t height, std::size_t width,
                 std::size_t kh, std::size_t kw, std::size_t channels);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_y);

// Elementwise suite. Every binary op requires identical dims.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_backward(const Tensor<T>& grad_y);

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> mul_backward(const Tensor<T>& x, const Tensor<T>& y,
                                             const Tensor<T>& grad_y);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> scale_backward(const Tensor<T>& grad_y, T c);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y);
// Splits a gradient of concat_channels back into its two inputs; x had `x_channels`.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>& grad_y,
                                                         std::size_t x_channels);

// (1 - z) * prev + z * cand
template <typename T>
Tensor<T> blend(const Tensor<T>& prev, const Tensor<T>& cand, const Tensor<T>& z);

template <typename T>
struct BlendGrads {
  Tensor<T> grad_prev;
  Tensor<T> grad_cand;
  Tensor<T> grad_z;
};

template <typename T>
BlendGrads<T> blend_backward(const Tensor<T>& prev, const Tensor<T>& cand, const Tensor<T>& z,
                             const Tensor<T>& grad_y);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Takes the forward output y.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& grad_y);

// 2x2 average pooling, stride 2. H and W must be even.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& grad_y);

// Per-pixel L2 norm across channels: H x W x D -> H x W.
template <typename T>
Tensor<T> l2_norm_channels(const Tensor<T>& x);

template <typename T>
T sum(const Tensor<T>& x);

template <typename T>
T sum_of_squares(const Tensor<T>& x);

// In-place accumulate, dst += src.
template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src);

}  // namespace stmn
