#pragma once

#include <array>
#include <string>

#include "pyramidseg/layers.hpp"

namespace pyseg {

// Pyramid view fusion: every pixel sees a narrow-to-wide pooled context of
// itself. Channel plan C -> C/4 (bottleneck) -> 4 x C/4 (concat) -> C/2
// (4-group conv) -> C (conv) -> layer norm over (C,H,W).
struct PvfConfig {
  int channels = 0;
  std::array<int, 3> pool_kernels{3, 5, 9};

  int bottleneck_channels() const { return channels / 4; }
  int hidden_channels() const { return channels / 2; }
  // Throws kConfig unless C % 8 == 0 and kernels are odd and
  // strictly increasing.
  void validate() const;
};

// Stride-1 average pooling with an odd kernel; output extent equals input.
template <typename T>
Tensor<T> pyramid_branch(const Tensor<T>& x, int kernel);

template <typename T>
class PvfBlock {
 public:
  struct Trace {
    Tensor<T> reduced;
    std::array<Tensor<T>, 4> branches;  // global, then pool_kernels in order
    Tensor<T> concatenated;
    Tensor<T> grouped;
    Tensor<T> mixed;
    Tensor<T> output;
  };

  PvfBlock() = default;
  PvfBlock(ParamSet<T>& params, const std::string& name, const PvfConfig& config, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const { return forward_trace(x).output; }
  Trace forward_trace(const Tensor<T>& x) const;

  const PvfConfig& config() const { return config_; }

  ConvLayer<T> bottleneck;
  ConvLayer<T> grouped;
  ConvLayer<T> mix;
  LayerNormLayer<T> norm;

 private:
  PvfConfig config_;
};

}  // namespace pyseg
