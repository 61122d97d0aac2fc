#pragma once

#include <vector>

#include "pyramidseg/tensor.hpp"

namespace pyseg {

// Convolution geometry. Stride is always one.
struct ConvSpec {
  int kernel = 3;
  int dilation = 1;
  int out_channels = 1;
  int groups = 1;
  int pad = -1;  // negative selects "same": dilation * (kernel - 1) / 2

  static ConvSpec same(int kernel, int dilation, int out_channels, int groups = 1) {
    return ConvSpec{kernel, dilation, out_channels, groups, -1};
  }
  int padding() const { return pad >= 0 ? pad : dilation * (kernel - 1) / 2; }
  // Throws kConfig for non-positive fields or channels not divisible by groups.
  void validate(int in_channels) const;
};

// x: (B,C,H,W), w: (m, C/g, k, k), b: (m) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& spec);

// Stride-1 pooling pads by k/2 and keeps the extent; padded cells are not
// counted in the mean.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int kernel, int stride);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// Half-pixel-centre bilinear interpolation. Same-size resize is an exact copy.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Piecewise-linear clamp to [-1, 1].
template <typename T>
Tensor<T> hardtanh(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int dim);

// Normalizes over the trailing last_n dims. gain and bias are optional and
// hold one value per index of the first normalized dim (per-channel affine).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int last_n, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5);

struct BatchNormState {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean(channels, 0.0f), running_var(channels, 1.0f) {}
};

// Training mode normalizes with batch moments and updates the running
// statistics; inference mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState& state, bool training);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
// x: (B,C,H,W) times w: (B,1,H,W), broadcast over channels.
template <typename T>
Tensor<T> mul_broadcast_channels(const Tensor<T>& x, const Tensor<T>& w);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Scalar sum(x * weights) with constant weights.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const std::vector<T>& weights);

}  // namespace pyseg
