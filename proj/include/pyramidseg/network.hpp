#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pyramidseg/dpr.hpp"
#include "pyramidseg/layers.hpp"
#include "pyramidseg/pvf.hpp"

namespace pyseg {

enum class Variant : int {
  kDeepPyramidPlus = 0,
  kUnetPlus = 1,
  kPvfOnly = 2,
};

const char* variant_name(Variant v);
// Accepts deeppyramid_plus, unet_plus, pvf_only; throws kConfig otherwise.
Variant parse_variant(const std::string& name);

struct NetworkConfig {
  int num_classes = 3;
  int input_size = 512;
  int base_width = 64;
  Variant variant = Variant::kDeepPyramidPlus;
  uint64_t seed = 0;

  bool uses_pvf() const { return variant != Variant::kUnetPlus; }
  bool uses_dpr() const { return variant == Variant::kDeepPyramidPlus; }
  // VGG16 stage widths w x (1, 2, 4, 8, 8).
  std::array<int, 5> encoder_widths() const;
  // Decoder output widths from the deepest level up: w x (4, 2, 1, 1).
  std::array<int, 4> decoder_widths() const;
  void validate() const;
};

// Two (conv3x3 + batch norm + ReLU) units.
template <typename T>
struct DoubleConv {
  ConvLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;

  DoubleConv() = default;
  DoubleConv(ParamSet<T>& params, const std::string& name, int in_channels, int out_channels, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool training) const;
};

template <typename T>
class SegmentationNet {
 public:
  struct ModuleCount {
    std::string name;
    std::size_t count;
  };

  explicit SegmentationNet(const NetworkConfig& config);
  SegmentationNet(const SegmentationNet&) = delete;
  SegmentationNet& operator=(const SegmentationNet&) = delete;

  // The five pre-pooling feature maps of the VGG16 encoder, shallowest first.
  std::vector<Tensor<T>> encode(const Tensor<T>& x, bool training) const;
  // (B,3,S,S) -> unnormalized logits (B,num_classes,S,S).
  Tensor<T> forward(const Tensor<T>& x, bool training) const;

  const NetworkConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }
  // Counts grouped by module: encoder stages, bottleneck, per-level decoder
  // blocks and the classifier head.
  std::vector<ModuleCount> module_counts() const;

 private:
  struct EncoderStage {
    std::vector<ConvLayer<T>> convs;
    std::vector<BatchNormLayer<T>> norms;
  };
  struct DecoderLevel {
    std::optional<DprBlock<T>> dpr;
    std::optional<DoubleConv<T>> block;
    std::optional<PvfBlock<T>> pvf;
  };

  NetworkConfig config_;
  ParamSet<T> params_;
  std::array<EncoderStage, 5> encoder_;
  std::optional<PvfBlock<T>> bottleneck_pvf_;
  std::array<DecoderLevel, 4> decoder_;
  ConvLayer<T> head_;
};

}  // namespace pyseg
