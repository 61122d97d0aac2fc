#pragma once

#include "pyramidseg/ops.hpp"
#include "pyramidseg/tensor.hpp"

namespace pyseg {

// Channels of an offset field for a k x k kernel: (dy, dx) per tap in
// row-major tap order. 18 for the 3 x 3 kernels used here.
constexpr int offset_channels(int kernel) { return 2 * kernel * kernel; }

// Bilinear read of x[n, c] at a fractional (row, col). Each of the four
// neighbours that falls outside the image contributes zero.
template <typename T>
T bilinear_sample(const Tensor<T>& x, int n, int c, double py, double px);

// Deformable dilated convolution with "same" geometry and stride one. Tap
// (i, j) of output pixel p reads x at p + dilation * (i - k/2, j - k/2) plus the
// per-pixel displacement stored in offsets, measured in pixels.
//   x: (B,C,H,W), w: (m,C,k,k), b: (m) or undefined, offsets: (B,2k^2,H,W)
template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dilation,
                        const Tensor<T>& offsets);

// Kernel extent of the offset predictor paired with a deformable branch:
// 9 for dilation 3 and 15 for dilation 6. Other dilations are rejected.
int offset_head_kernel(int dilation);

// Regular "same" convolution to 18 channels followed by hardtanh, so every
// displacement lies in [-1, 1].
template <typename T>
Tensor<T> offset_head(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dilation);

template <typename T>
struct TriBranch {
  Tensor<T> near;  // dilation 1, regular
  Tensor<T> mid;   // dilation 3, deformable
  Tensor<T> far;   // dilation 6, deformable
};

// Three convolutions sharing one weight and bias.
template <typename T>
TriBranch<T> shared_tri_branch(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               const Tensor<T>& offsets_mid, const Tensor<T>& offsets_far);

}  // namespace pyseg
