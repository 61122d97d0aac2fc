#include "pyramidseg/dpr.hpp"

namespace pyseg {

void DprConfig::validate() const {
  if (decoder_channels <= 0 || skip_channels <= 0 || out_channels <= 0) {
    raise(ErrorCode::kConfig, "dpr: channel widths must be positive");
  }
  if (out_channels > concat_channels()) {
    raise(ErrorCode::kConfig, "dpr: out_channels " + std::to_string(out_channels) +
                                  " exceeds concatenated width " + std::to_string(concat_channels()));
  }
}

template <typename T>
FfdResult<T> ffd_fuse(const std::vector<Tensor<T>>& branches,
                      const std::array<ConvLayer<T>, 3>& descriptors) {
  if (branches.size() != 3) {
    raise(ErrorCode::kInvalidArgument, "ffd_fuse: expected 3 branches, got " + std::to_string(branches.size()));
  }
  for (const auto& b : branches) {
    if (b.shape() != branches[0].shape()) {
      raise(ErrorCode::kShape, "ffd_fuse: branch shapes differ: " + shape_str(b.shape()) + " vs " +
                                   shape_str(branches[0].shape()));
    }
  }
  std::vector<Tensor<T>> logits;
  for (int i = 0; i < 3; ++i) logits.push_back(descriptors[i](branches[i]));
  FfdResult<T> r;
  r.weights = softmax(concat_channels(logits), 1);
  Tensor<T> acc;
  for (int i = 0; i < 3; ++i) {
    auto term = mul_broadcast_channels(branches[i], slice_channels(r.weights, i, 1));
    acc = acc.defined() ? add(acc, term) : term;
  }
  r.fused = acc;
  return r;
}

template <typename T>
DprBlock<T>::DprBlock(ParamSet<T>& params, const std::string& name, const DprConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const int cin = config_.concat_channels(), cout = config_.out_channels;
  head_mid = ConvLayer<T>(params, name + ".offset_mid", cin,
                          ConvSpec::same(offset_head_kernel(3), 1, offset_channels(3)), rng, Init::kZero);
  head_far = ConvLayer<T>(params, name + ".offset_far", cin,
                          ConvSpec::same(offset_head_kernel(6), 1, offset_channels(3)), rng, Init::kZero);
  value_weight = params.add(name + ".value.weight", init_weight<T>({cout, cin, 3, 3}, Init::kHe, rng));
  value_bias = params.add(name + ".value.bias", Tensor<T>(Shape{cout}));
  for (int i = 0; i < 3; ++i) {
    descriptors[i] = ConvLayer<T>(params, name + ".ffd" + std::to_string(i), cout,
                                  ConvSpec::same(1, 1, 1), rng);
  }
  refine = ConvLayer<T>(params, name + ".refine", cout, ConvSpec::same(3, 1, cout), rng);
  norm = LayerNormLayer<T>(params, name + ".norm", cout);
}

template <typename T>
typename DprBlock<T>::Trace DprBlock<T>::forward_trace(const Tensor<T>& dec, const Tensor<T>& skip) const {
  if (dec.rank() != 4 || skip.rank() != 4) raise(ErrorCode::kShape, "dpr: inputs must be rank 4");
  if (dec.dim(1) != config_.decoder_channels || skip.dim(1) != config_.skip_channels) {
    raise(ErrorCode::kShape, "dpr: channel mismatch, decoder " + shape_str(dec.shape()) + " skip " +
                                 shape_str(skip.shape()));
  }
  const int h = skip.dim(2), w = skip.dim(3);
  if (dec.dim(0) != skip.dim(0) || dec.dim(2) * 2 != h || dec.dim(3) * 2 != w) {
    raise(ErrorCode::kShape, "dpr: skip " + shape_str(skip.shape()) + " must be twice the decoder extent " +
                                 shape_str(dec.shape()));
  }
  Trace t;
  t.upsampled = bilinear_resize(dec, h, w);
  t.concatenated = concat_channels<T>({t.upsampled, skip});
  t.offsets_mid = offset_head(t.concatenated, head_mid.weight, head_mid.bias, 3);
  t.offsets_far = offset_head(t.concatenated, head_far.weight, head_far.bias, 6);
  t.branches = shared_tri_branch(t.concatenated, value_weight, value_bias, t.offsets_mid, t.offsets_far);
  t.ffd = ffd_fuse<T>({t.branches.near, t.branches.mid, t.branches.far}, descriptors);
  t.output = relu(norm(refine(t.ffd.fused)));
  return t;
}

template FfdResult<float> ffd_fuse(const std::vector<Tensor<float>>&, const std::array<ConvLayer<float>, 3>&);
template FfdResult<double> ffd_fuse(const std::vector<Tensor<double>>&, const std::array<ConvLayer<double>, 3>&);
template class DprBlock<float>;
template class DprBlock<double>;

}  // namespace pyseg
