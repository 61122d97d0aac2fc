#pragma once

#include <array>
#include <string>
#include <vector>

#include "pyramidseg/deform.hpp"
#include "pyramidseg/layers.hpp"

namespace pyseg {

struct DprConfig {
  int decoder_channels = 0;
  int skip_channels = 0;
  int out_channels = 0;

  int concat_channels() const { return decoder_channels + skip_channels; }
  // Throws kConfig unless all widths are positive and out <= concat.
  void validate() const;
};

template <typename T>
struct FfdResult {
  Tensor<T> fused;
  Tensor<T> weights;  // (B,3,H,W), softmax over dim 1
};

// Feature fusion decision: a 1x1 conv reduces each branch to a one-channel
// descriptor, a per-pixel softmax over the three descriptors yields convex
// weights, and the output is the weighted sum of the branches.
template <typename T>
FfdResult<T> ffd_fuse(const std::vector<Tensor<T>>& branches,
                      const std::array<ConvLayer<T>, 3>& descriptors);

template <typename T>
class DprBlock {
 public:
  struct Trace {
    Tensor<T> upsampled;
    Tensor<T> concatenated;
    Tensor<T> offsets_mid;
    Tensor<T> offsets_far;
    TriBranch<T> branches;
    FfdResult<T> ffd;
    Tensor<T> output;
  };

  DprBlock() = default;
  DprBlock(ParamSet<T>& params, const std::string& name, const DprConfig& config, Rng& rng);

  // dec: (B,Cd,h,w) coarse features, skip: (B,Ce,H,W) with H = 2h, W = 2w.
  Tensor<T> forward(const Tensor<T>& dec, const Tensor<T>& skip) const {
    return forward_trace(dec, skip).output;
  }
  Trace forward_trace(const Tensor<T>& dec, const Tensor<T>& skip) const;

  const DprConfig& config() const { return config_; }

  ConvLayer<T> head_mid;  // 9x9, feeds the dilation-3 branch
  ConvLayer<T> head_far;  // 15x15, feeds the dilation-6 branch
  Tensor<T> value_weight;
  Tensor<T> value_bias;
  std::array<ConvLayer<T>, 3> descriptors;
  ConvLayer<T> refine;
  LayerNormLayer<T> norm;

 private:
  DprConfig config_;
};

}  // namespace pyseg
