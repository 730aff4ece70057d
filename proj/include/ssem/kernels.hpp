#pragma once

#include <cstdint>
#include <utility>

#include "ssem/tensor.hpp"

// Graph-free numeric kernels behind the differentiable ops. Instantiated for
// float and double so the finite-difference oracle can run in 64-bit.
namespace ssem::nd::kernels {

enum class Padding { same, valid };

struct ConvGeometry {
    std::int64_t in_h = 0, in_w = 0;
    std::int64_t out_h = 0, out_w = 0;
    std::int64_t pad_top = 0, pad_left = 0;
    std::int64_t kernel_h = 0, kernel_w = 0;
    std::int64_t stride = 1;
};

// Standard convolution shape formula: "same" gives ceil(in / stride) with the
// surplus padding split toward the bottom/right; "valid" uses no padding.
ConvGeometry conv_geometry(std::int64_t in_h, std::int64_t in_w, std::int64_t kernel_h,
                           std::int64_t kernel_w, std::int64_t stride, Padding padding);

// input [B,C,H,W], kernels [K,C,kh,kw] -> [B,K,H',W'] (cross-correlation).
template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                              std::int64_t stride, Padding padding);

// Adjoint of conv2d_forward w.r.t. its input; this is also the transposed
// convolution. grad_out [B,K,H',W'] -> [B,C,in_h,in_w].
template <class T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernels,
                                 std::int64_t stride, Padding padding, std::int64_t in_h,
                                 std::int64_t in_w);

// Gradient of conv2d_forward w.r.t. its kernels: [K,C,kh,kw].
template <class T>
BasicTensor<T> conv2d_kernel_grad(const BasicTensor<T>& input, const BasicTensor<T>& grad_out,
                                  std::int64_t kernel_h, std::int64_t kernel_w, std::int64_t stride,
                                  Padding padding);

// Bilinear sampling of image [C,H,W] at coords [H',W',2] (row, col).
// Samples outside [0,H-1]x[0,W-1] are 0.
template <class T>
BasicTensor<T> grid_sample_forward(const BasicTensor<T>& image, const BasicTensor<T>& coords);

template <class T>
void grid_sample_backward(const BasicTensor<T>& image, const BasicTensor<T>& coords,
                          const BasicTensor<T>& grad_out, BasicTensor<T>* grad_image,
                          BasicTensor<T>* grad_coords);

// Align-corners bilinear resize of [C,H,W] to [C,out_h,out_w].
template <class T>
BasicTensor<T> resize_forward(const BasicTensor<T>& input, std::int64_t out_h, std::int64_t out_w);

template <class T>
BasicTensor<T> resize_backward(const BasicTensor<T>& grad_out, std::int64_t in_h, std::int64_t in_w);

// Forward differences along rows and columns of a [H,W] field; the trailing
// row/column difference is 0.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> spatial_gradient_forward(const BasicTensor<T>& field);

template <class T>
BasicTensor<T> spatial_gradient_backward(const BasicTensor<T>& grad_rows,
                                         const BasicTensor<T>& grad_cols);

// [m,k] x [k,n] -> [m,n]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_a = false,
                      bool transpose_b = false);

} // namespace ssem::nd::kernels
