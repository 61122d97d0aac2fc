#include "pyramidseg/pvf.hpp"

namespace pyseg {

void PvfConfig::validate() const {
  // The 4-group conv maps C to C/2, so C/2 must split into four groups too.
  if (channels < 8 || channels % 8 != 0) {
    raise(ErrorCode::kConfig, "pvf: channels must be a positive multiple of 8, got " +
                                  std::to_string(channels));
  }
  for (std::size_t i = 0; i < pool_kernels.size(); ++i) {
    if (pool_kernels[i] <= 0 || pool_kernels[i] % 2 == 0) {
      raise(ErrorCode::kConfig, "pvf: pool kernels must be odd and positive");
    }
    if (i > 0 && pool_kernels[i] <= pool_kernels[i - 1]) {
      raise(ErrorCode::kConfig, "pvf: pool kernels must be strictly increasing");
    }
  }
}

template <typename T>
Tensor<T> pyramid_branch(const Tensor<T>& x, int kernel) {
  if (kernel % 2 == 0) raise(ErrorCode::kConfig, "pyramid_branch: kernel must be odd");
  return avg_pool(x, kernel, 1);
}

template <typename T>
PvfBlock<T>::PvfBlock(ParamSet<T>& params, const std::string& name, const PvfConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const int c = config_.channels;
  bottleneck = ConvLayer<T>(params, name + ".bottleneck", c, ConvSpec::same(1, 1, c / 4), rng);
  grouped = ConvLayer<T>(params, name + ".grouped", c, ConvSpec::same(3, 1, c / 2, 4), rng);
  mix = ConvLayer<T>(params, name + ".mix", c / 2, ConvSpec::same(3, 1, c), rng);
  norm = LayerNormLayer<T>(params, name + ".norm", c);
}

template <typename T>
typename PvfBlock<T>::Trace PvfBlock<T>::forward_trace(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels) {
    raise(ErrorCode::kShape, "pvf: expected (B," + std::to_string(config_.channels) + ",H,W), got " +
                                 shape_str(x.shape()));
  }
  const int h = x.dim(2), w = x.dim(3);
  const int half = config_.pool_kernels.back() / 2;
  if (h < half || w < half) {
    raise(ErrorCode::kShape, "pvf: spatial extent " + shape_str(x.shape()) +
                                 " smaller than half the widest pooling kernel");
  }
  Trace t;
  t.reduced = bottleneck(x);
  t.branches[0] = bilinear_resize(global_avg_pool(t.reduced), h, w);
  for (int i = 0; i < 3; ++i) t.branches[i + 1] = pyramid_branch(t.reduced, config_.pool_kernels[i]);
  t.concatenated = concat_channels<T>({t.branches.begin(), t.branches.end()});
  t.grouped = grouped(t.concatenated);
  t.mixed = mix(t.grouped);
  t.output = norm(t.mixed);
  return t;
}

template Tensor<float> pyramid_branch(const Tensor<float>&, int);
template Tensor<double> pyramid_branch(const Tensor<double>&, int);
template class PvfBlock<float>;
template class PvfBlock<double>;

}  // namespace pyseg
