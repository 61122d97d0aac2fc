#include "pyramidseg/network.hpp"

#include <map>

namespace pyseg {

namespace {
constexpr std::array<int, 5> kStageConvs{2, 2, 3, 3, 3};
constexpr std::array<int, 5> kStageWidthMultiplier{1, 2, 4, 8, 8};
constexpr std::array<int, 4> kDecoderWidthMultiplier{4, 2, 1, 1};
}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kDeepPyramidPlus: return "deeppyramid_plus";
    case Variant::kUnetPlus: return "unet_plus";
    case Variant::kPvfOnly: return "pvf_only";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kDeepPyramidPlus, Variant::kUnetPlus, Variant::kPvfOnly}) {
    if (name == variant_name(v)) return v;
  }
  raise(ErrorCode::kConfig, "unknown variant '" + name + "' (expected deeppyramid_plus, unet_plus or pvf_only)");
}

std::array<int, 5> NetworkConfig::encoder_widths() const {
  std::array<int, 5> out{};
  for (int i = 0; i < 5; ++i) out[i] = base_width * kStageWidthMultiplier[i];
  return out;
}

std::array<int, 4> NetworkConfig::decoder_widths() const {
  std::array<int, 4> out{};
  for (int i = 0; i < 4; ++i) out[i] = base_width * kDecoderWidthMultiplier[i];
  return out;
}

void NetworkConfig::validate() const {
  if (num_classes < 2) raise(ErrorCode::kConfig, "num_classes must be at least 2");
  if (input_size <= 0 || input_size % 16 != 0) {
    raise(ErrorCode::kConfig, "input size " + std::to_string(input_size) + " must be a positive multiple of 16");
  }
  if (base_width <= 0 || base_width % 8 != 0) {
    raise(ErrorCode::kConfig, "base width " + std::to_string(base_width) + " must be a positive multiple of 8");
  }
}

template <typename T>
DoubleConv<T>::DoubleConv(ParamSet<T>& params, const std::string& name, int in_channels,
                          int out_channels, Rng& rng) {
  conv1 = ConvLayer<T>(params, name + ".conv1", in_channels, ConvSpec::same(3, 1, out_channels), rng);
  bn1 = BatchNormLayer<T>(params, name + ".bn1", out_channels);
  conv2 = ConvLayer<T>(params, name + ".conv2", out_channels, ConvSpec::same(3, 1, out_channels), rng);
  bn2 = BatchNormLayer<T>(params, name + ".bn2", out_channels);
}

template <typename T>
Tensor<T> DoubleConv<T>::operator()(const Tensor<T>& x, bool training) const {
  return relu(bn2(conv2(relu(bn1(conv1(x), training))), training));
}

template <typename T>
SegmentationNet<T>::SegmentationNet(const NetworkConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const auto widths = config_.encoder_widths();
  int in = 3;
  for (int s = 0; s < 5; ++s) {
    const std::string stage = "encoder.stage" + std::to_string(s + 1);
    for (int i = 0; i < kStageConvs[s]; ++i) {
      const std::string idx = std::to_string(i + 1);
      encoder_[s].convs.emplace_back(params_, stage + ".conv" + idx, in, ConvSpec::same(3, 1, widths[s]), rng);
      encoder_[s].norms.emplace_back(params_, stage + ".bn" + idx, widths[s]);
      in = widths[s];
    }
  }
  if (config_.uses_pvf()) {
    bottleneck_pvf_.emplace(params_, "bottleneck.pvf", PvfConfig{widths[4]}, rng);
  }
  const auto dec_widths = config_.decoder_widths();
  int dec_in = widths[4];
  for (int l = 0; l < 4; ++l) {
    const int level = 4 - l;
    const std::string name = "decoder.level" + std::to_string(level);
    const int skip = widths[level - 1];
    const int out = dec_widths[l];
    if (config_.uses_dpr()) {
      decoder_[l].dpr.emplace(params_, name + ".dpr", DprConfig{dec_in, skip, out}, rng);
    } else {
      decoder_[l].block.emplace(params_, name + ".block", dec_in + skip, out, rng);
    }
    if (config_.uses_pvf()) decoder_[l].pvf.emplace(params_, name + ".pvf", PvfConfig{out}, rng);
    dec_in = out;
  }
  head_ = ConvLayer<T>(params_, "head", dec_in, ConvSpec::same(1, 1, config_.num_classes), rng);
}

template <typename T>
std::vector<Tensor<T>> SegmentationNet<T>::encode(const Tensor<T>& x, bool training) const {
  std::vector<Tensor<T>> skips;
  Tensor<T> y = x;
  for (int s = 0; s < 5; ++s) {
    if (s > 0) y = max_pool2(y);
    for (std::size_t i = 0; i < encoder_[s].convs.size(); ++i) {
      y = relu(encoder_[s].norms[i](encoder_[s].convs[i](y), training));
    }
    skips.push_back(y);
  }
  return skips;
}

template <typename T>
Tensor<T> SegmentationNet<T>::forward(const Tensor<T>& x, bool training) const {
  const int s = config_.input_size;
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s) {
    raise(ErrorCode::kShape, "network input must be (B,3," + std::to_string(s) + "," + std::to_string(s) +
                                 "), got " + shape_str(x.shape()));
  }
  const auto skips = encode(x, training);
  Tensor<T> y = skips[4];
  if (bottleneck_pvf_) y = bottleneck_pvf_->forward(y);
  for (int l = 0; l < 4; ++l) {
    const Tensor<T>& skip = skips[3 - l];
    const DecoderLevel& level = decoder_[l];
    if (level.dpr) {
      y = level.dpr->forward(y, skip);
    } else {
      auto up = bilinear_resize(y, skip.dim(2), skip.dim(3));
      y = (*level.block)(concat_channels<T>({up, skip}), training);
    }
    if (level.pvf) y = level.pvf->forward(y);
  }
  return bilinear_resize(head_(y), s, s);
}

template <typename T>
std::vector<typename SegmentationNet<T>::ModuleCount> SegmentationNet<T>::module_counts() const {
  std::vector<ModuleCount> out;
  std::map<std::string, std::size_t> index;
  for (const auto& e : params_.entries()) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t dot; (dot = e.name.find('.', start)) != std::string::npos; start = dot + 1) {
      parts.push_back(e.name.substr(start, dot - start));
    }
    // encoder.stageN, decoder.levelN.<block>, bottleneck, head
    const std::size_t depth = parts[0] == "decoder" ? 3 : parts[0] == "encoder" ? 2 : 1;
    std::string key = parts[0];
    for (std::size_t i = 1; i < depth && i < parts.size(); ++i) key += "." + parts[i];
    auto it = index.find(key);
    if (it == index.end()) {
      index[key] = out.size();
      out.push_back({key, 0});
      it = index.find(key);
    }
    out[it->second].count += e.value.numel();
  }
  return out;
}

template struct DoubleConv<float>;
template struct DoubleConv<double>;
template class SegmentationNet<float>;
template class SegmentationNet<double>;

}  // namespace pyseg
