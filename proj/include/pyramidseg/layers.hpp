#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "pyramidseg/ops.hpp"
#include "pyramidseg/rng.hpp"
#include "pyramidseg/tensor.hpp"

namespace pyseg {

// Ordered registry of named trainable tensors plus non-trainable batch-norm
// statistics. Registration order is the checkpoint order.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };
  struct Buffer {
    std::string name;
    std::shared_ptr<BatchNormState> state;
  };

  Tensor<T> add(const std::string& name, Tensor<T> value) {
    check_unique(name);
    value.set_requires_grad(true);
    entries_.push_back({name, value});
    return value;
  }

  void add_buffer(const std::string& name, std::shared_ptr<BatchNormState> state) {
    check_unique(name + ".running_mean");
    buffers_.push_back({name, std::move(state)});
  }

  const std::vector<Entry>& entries() const { return entries_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

 private:
  void check_unique(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) raise(ErrorCode::kDuplicateName, "parameter name registered twice: " + name);
    }
    for (const auto& b : buffers_) {
      if (b.name + ".running_mean" == name) {
        raise(ErrorCode::kDuplicateName, "buffer name registered twice: " + name);
      }
    }
  }

  std::vector<Entry> entries_;
  std::vector<Buffer> buffers_;
};

enum class Init { kHe, kZero };

template <typename T>
Tensor<T> init_weight(const Shape& shape, Init init, Rng& rng) {
  Tensor<T> t(shape);
  if (init == Init::kHe) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (T& v : t.mutable_data()) v = static_cast<T>(rng.normal() * std_dev);
  }
  return t;
}

template <typename T>
struct ConvLayer {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;

  ConvLayer() = default;
  ConvLayer(ParamSet<T>& params, const std::string& name, int in_channels, ConvSpec conv_spec,
            Rng& rng, Init init = Init::kHe)
      : spec(conv_spec) {
    spec.validate(in_channels);
    weight = params.add(name + ".weight",
                        init_weight<T>({spec.out_channels, in_channels / spec.groups, spec.kernel,
                                        spec.kernel},
                                       init, rng));
    bias = params.add(name + ".bias", Tensor<T>(Shape{spec.out_channels}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, spec); }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::shared_ptr<BatchNormState> state;

  BatchNormLayer() = default;
  BatchNormLayer(ParamSet<T>& params, const std::string& name, int channels)
      : state(std::make_shared<BatchNormState>(channels)) {
    gamma = params.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = params.add(name + ".beta", Tensor<T>(Shape{channels}));
    params.add_buffer(name, state);
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, *state, training);
  }
};

// Per-channel affine layer normalization over (C,H,W).
template <typename T>
struct LayerNormLayer {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNormLayer() = default;
  LayerNormLayer(ParamSet<T>& params, const std::string& name, int channels) {
    gain = params.add(name + ".gain", Tensor<T>::full({channels}, T(1)));
    bias = params.add(name + ".bias", Tensor<T>(Shape{channels}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, 3, gain, bias); }
};

}  // namespace pyseg
