#include "pyramidseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "gemm.hpp"

namespace pyseg {

namespace {

using detail::make_result;
using detail::wants_grad;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    raise(ErrorCode::kShape, std::string(op) + ": " + what + " must have rank " +
                                 std::to_string(rank) + ", got " + shape_str(s));
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise(ErrorCode::kShape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Copies the receptive-field patches of a (C,H,W) image into a
// (C*k*k, Ho*Wo) matrix.
template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, int dil, int pad, int ho, int wo, T* col) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* dst = col + static_cast<std::size_t>((c * k + ki) * k + kj) * ho * wo;
        const int off_w = kj * dil - pad;
        const int lo = std::clamp(-off_w, 0, wo);
        const int hi = std::clamp(w - off_w, lo, wo);
        const int oh0 = std::clamp(pad - ki * dil, 0, ho);
        const int oh1 = std::clamp(h + pad - ki * dil, oh0, ho);
        // One fill per patch plane; the in-bounds spans are copied over it.
        if (lo > 0 || hi < wo || oh0 > 0 || oh1 < ho) std::fill(dst, dst + static_cast<std::size_t>(ho) * wo, T(0));
        for (int oh = oh0; oh < oh1; ++oh) {
          const T* src = x + (static_cast<std::size_t>(c) * h + oh + ki * dil - pad) * w + off_w;
          std::copy(src + lo, src + hi, dst + static_cast<std::size_t>(oh) * wo + lo);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int h, int w, int k, int dil, int pad, int ho, int wo, T* x) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* src = col + static_cast<std::size_t>((c * k + ki) * k + kj) * ho * wo;
        const int off_w = kj * dil - pad;
        const int lo = std::clamp(-off_w, 0, wo);
        const int hi = std::clamp(w - off_w, lo, wo);
        for (int oh = 0; oh < ho; ++oh, src += wo) {
          const int ih = oh + ki * dil - pad;
          if (ih < 0 || ih >= h) continue;
          T* dst = x + (static_cast<std::size_t>(c) * h + ih) * w + off_w;
          for (int ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
        }
      }
    }
  }
}

}  // namespace

void ConvSpec::validate(int in_channels) const {
  if (kernel <= 0 || dilation <= 0 || out_channels <= 0 || groups <= 0) {
    raise(ErrorCode::kConfig, "conv2d: kernel, dilation, out_channels and groups must be positive");
  }
  if (in_channels % groups != 0) {
    raise(ErrorCode::kConfig, "conv2d: in_channels " + std::to_string(in_channels) +
                                  " not divisible by groups " + std::to_string(groups));
  }
  if (out_channels % groups != 0) {
    raise(ErrorCode::kConfig, "conv2d: out_channels " + std::to_string(out_channels) +
                                  " not divisible by groups " + std::to_string(groups));
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& spec) {
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(w.shape(), 4, "conv2d", "weight");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), wd = x.dim(3);
  spec.validate(channels);
  const int k = spec.kernel, dil = spec.dilation, pad = spec.padding(), groups = spec.groups;
  const int m = spec.out_channels;
  const Shape expected{m, channels / groups, k, k};
  static const char* kWeightDims[] = {"out_channels", "in_channels/groups", "kernel_h", "kernel_w"};
  for (int i = 0; i < 4; ++i) {
    if (w.shape()[i] != expected[i]) {
      raise(ErrorCode::kShape, std::string("conv2d: weight dim ") + std::to_string(i) + " (" +
                                   kWeightDims[i] + ") expected " + std::to_string(expected[i]) +
                                   ", got " + std::to_string(w.shape()[i]));
    }
  }
  if (b.defined() && b.shape() != Shape{m}) {
    raise(ErrorCode::kShape, "conv2d: bias shape " + shape_str(b.shape()) + " expected (" +
                                 std::to_string(m) + ")");
  }
  const int ho = h + 2 * pad - dil * (k - 1);
  const int wo = wd + 2 * pad - dil * (k - 1);
  if (ho <= 0 || wo <= 0) {
    raise(ErrorCode::kShape, "conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                                 std::to_string(k) + " dilation " + std::to_string(dil));
  }
  const int cg = channels / groups, mg = m / groups, kk = cg * k * k, n_out = ho * wo;
  const bool pointwise = (k == 1 && pad == 0);
  const std::size_t in_plane = static_cast<std::size_t>(h) * wd;

  std::vector<T> out(static_cast<std::size_t>(batch) * m * n_out);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * n_out);
  const T* xd = x.data().data();
  const T* wdp = w.data().data();
  for (int n = 0; n < batch; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const T* xg = xd + (static_cast<std::size_t>(n) * channels + gi * cg) * in_plane;
      const T* cols = xg;
      if (!pointwise) {
        im2col(xg, cg, h, wd, k, dil, pad, ho, wo, col.data());
        cols = col.data();
      }
      detail::gemm(false, false, mg, n_out, kk, T(1), wdp + static_cast<std::size_t>(gi) * mg * kk,
                   kk, cols, n_out, T(0),
                   out.data() + (static_cast<std::size_t>(n) * m + gi * mg) * n_out, n_out);
    }
    if (b.defined()) {
      for (int o = 0; o < m; ++o) {
        T* dst = out.data() + (static_cast<std::size_t>(n) * m + o) * n_out;
        const T bias = b.data()[o];
        for (int i = 0; i < n_out; ++i) dst[i] += bias;
      }
    }
  }

  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& wn = self.inputs[1];
    auto& bn = self.inputs[2];
    const T* dy = self.grad.data();
    const T* xv = xn->data.data();
    const T* wv = wn->data.data();
    std::vector<T> colb(pointwise ? 0 : static_cast<std::size_t>(kk) * n_out);
    T* dw = wants_grad(wn) ? wn->grad_buffer() : nullptr;
    T* dx = wants_grad(xn) ? xn->grad_buffer() : nullptr;
    for (int n = 0; n < batch; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const T* dyg = dy + (static_cast<std::size_t>(n) * m + gi * mg) * n_out;
        const T* xg = xv + (static_cast<std::size_t>(n) * channels + gi * cg) * in_plane;
        if (dw) {
          const T* cols = xg;
          if (!pointwise) {
            im2col(xg, cg, h, wd, k, dil, pad, ho, wo, colb.data());
            cols = colb.data();
          }
          detail::gemm(false, true, mg, kk, n_out, T(1), dyg, n_out, cols, n_out, T(1),
                       dw + static_cast<std::size_t>(gi) * mg * kk, kk);
        }
        if (dx) {
          T* dxg = dx + (static_cast<std::size_t>(n) * channels + gi * cg) * in_plane;
          const T* wg = wv + static_cast<std::size_t>(gi) * mg * kk;
          if (pointwise) {
            detail::gemm(true, false, kk, n_out, mg, T(1), wg, kk, dyg, n_out, T(1), dxg, n_out);
          } else {
            detail::gemm(true, false, kk, n_out, mg, T(1), wg, kk, dyg, n_out, T(0), colb.data(),
                         n_out);
            col2im_add(colb.data(), cg, h, wd, k, dil, pad, ho, wo, dxg);
          }
        }
      }
    }
    if (wants_grad(bn)) {
      T* db = bn->grad_buffer();
      for (int n = 0; n < batch; ++n) {
        for (int o = 0; o < m; ++o) {
          const T* src = dy + (static_cast<std::size_t>(n) * m + o) * n_out;
          T acc = 0;
          for (int i = 0; i < n_out; ++i) acc += src[i];
          db[o] += acc;
        }
      }
    }
  };
  return make_result<T>({batch, m, ho, wo}, std::move(out), "conv2d", {x, w, b}, backward);
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int kernel, int stride) {
  require_rank(x.shape(), 4, "avg_pool", "input");
  if (kernel <= 0 || stride <= 0) raise(ErrorCode::kConfig, "avg_pool: kernel and stride must be positive");
  if (stride == 1 && kernel % 2 == 0) {
    raise(ErrorCode::kConfig, "avg_pool: stride-1 pooling needs an odd kernel, got " + std::to_string(kernel));
  }
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int pad = stride == 1 ? kernel / 2 : 0;
  if (kernel > h + 2 * pad || kernel > w + 2 * pad) {
    raise(ErrorCode::kShape, "avg_pool: kernel " + std::to_string(kernel) + " exceeds padded input " +
                                 shape_str(x.shape()));
  }
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  const int planes = batch * channels;
  std::vector<T> out(static_cast<std::size_t>(planes) * ho * wo);
  const T* xd = x.data().data();
  for (int p = 0; p < planes; ++p) {
    const T* src = xd + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oh = 0; oh < ho; ++oh) {
      const int h0 = std::max(oh * stride - pad, 0), h1 = std::min(oh * stride - pad + kernel, h);
      for (int ow = 0; ow < wo; ++ow) {
        const int w0 = std::max(ow * stride - pad, 0), w1 = std::min(ow * stride - pad + kernel, w);
        T acc = 0;
        for (int i = h0; i < h1; ++i) {
          for (int j = w0; j < w1; ++j) acc += src[i * w + j];
        }
        dst[oh * wo + ow] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    const T* dy = self.grad.data();
    for (int p = 0; p < planes; ++p) {
      T* dst = dx + static_cast<std::size_t>(p) * h * w;
      const T* src = dy + static_cast<std::size_t>(p) * ho * wo;
      for (int oh = 0; oh < ho; ++oh) {
        const int h0 = std::max(oh * stride - pad, 0), h1 = std::min(oh * stride - pad + kernel, h);
        for (int ow = 0; ow < wo; ++ow) {
          const int w0 = std::max(ow * stride - pad, 0), w1 = std::min(ow * stride - pad + kernel, w);
          const T g = src[oh * wo + ow] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (int i = h0; i < h1; ++i) {
            for (int j = w0; j < w1; ++j) dst[i * w + j] += g;
          }
        }
      }
    }
  };
  return make_result<T>({batch, channels, ho, wo}, std::move(out), "avg_pool", {x}, backward);
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const int batch = x.dim(0), channels = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (plane == 0) raise(ErrorCode::kShape, "global_avg_pool: empty spatial extent");
  std::vector<T> out(static_cast<std::size_t>(batch) * channels);
  const T* xd = x.data().data();
  for (std::size_t p = 0; p < out.size(); ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const T g = self.grad[p] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) dx[p * plane + i] += g;
    }
  };
  return make_result<T>({batch, channels, 1, 1}, std::move(out), "global_avg_pool", {x}, backward);
}

namespace {

struct InterpAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

InterpAxis interp_axis(int in, int out) {
  InterpAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    a.lo[o] = i0;
    a.hi[o] = std::min(i0 + 1, in - 1);
    a.frac[o] = src - i0;
  }
  return a;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  require_rank(x.shape(), 4, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) raise(ErrorCode::kShape, "bilinear_resize: output extent must be >= 1");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int planes = batch * channels;
  if (h == out_h && w == out_w) {
    std::vector<T> out(x.data().begin(), x.data().end());
    auto backward = [](Node<T>& self) {
      auto& xn = self.inputs[0];
      if (!wants_grad(xn)) return;
      T* dx = xn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
    };
    return make_result<T>(x.shape(), std::move(out), "bilinear_resize", {x}, backward);
  }
  const InterpAxis ay = interp_axis(h, out_h);
  const InterpAxis ax = interp_axis(w, out_w);
  std::vector<T> out(static_cast<std::size_t>(planes) * out_h * out_w);
  const T* xd = x.data().data();
  for (int p = 0; p < planes; ++p) {
    const T* src = xd + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T ly = static_cast<T>(ay.frac[oy]);
      const T* r0 = src + ay.lo[oy] * w;
      const T* r1 = src + ay.hi[oy] * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T lx = static_cast<T>(ax.frac[ox]);
        const int x0 = ax.lo[ox], x1 = ax.hi[ox];
        const T top = (1 - lx) * r0[x0] + lx * r0[x1];
        const T bot = (1 - lx) * r1[x0] + lx * r1[x1];
        dst[oy * out_w + ox] = (1 - ly) * top + ly * bot;
      }
    }
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (int p = 0; p < planes; ++p) {
      T* d = dx + static_cast<std::size_t>(p) * h * w;
      const T* g = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const T ly = static_cast<T>(ay.frac[oy]);
        T* r0 = d + ay.lo[oy] * w;
        T* r1 = d + ay.hi[oy] * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const T lx = static_cast<T>(ax.frac[ox]);
          const T v = g[oy * out_w + ox];
          r0[ax.lo[ox]] += (1 - ly) * (1 - lx) * v;
          r0[ax.hi[ox]] += (1 - ly) * lx * v;
          r1[ax.lo[ox]] += ly * (1 - lx) * v;
          r1[ax.hi[ox]] += ly * lx * v;
        }
      }
    }
  };
  return make_result<T>({batch, channels, out_h, out_w}, std::move(out), "bilinear_resize", {x}, backward);
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "max_pool2", "input");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    raise(ErrorCode::kShape, "max_pool2: spatial extent must be even, got " + shape_str(x.shape()));
  }
  const int ho = h / 2, wo = w / 2, planes = batch * channels;
  std::vector<T> out(static_cast<std::size_t>(planes) * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const T* xd = x.data().data();
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * h * w;
    for (int oh = 0; oh < ho; ++oh) {
      for (int ow = 0; ow < wo; ++ow) {
        std::size_t best = base + (2 * oh) * w + 2 * ow;
        for (int di = 0; di < 2; ++di) {
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + (2 * oh + di) * w + 2 * ow + dj;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(p) * ho + oh) * wo + ow;
        out[o] = xd[best];
        argmax[o] = best;
      }
    }
  }
  auto backward = [argmax = std::move(argmax)](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[o];
  };
  return make_result<T>({batch, channels, ho, wo}, std::move(out), "max_pool2", {x}, backward);
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) raise(ErrorCode::kInvalidArgument, "concat_channels: empty input list");
  for (const auto& t : xs) require_rank(t.shape(), 4, "concat_channels", "input");
  const int batch = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int total = 0;
  for (const auto& t : xs) {
    if (t.dim(0) != batch || t.dim(2) != h || t.dim(3) != w) {
      raise(ErrorCode::kShape, "concat_channels: " + shape_str(t.shape()) + " incompatible with " +
                                   shape_str(xs[0].shape()));
    }
    total += t.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(batch) * total * plane);
  std::vector<int> offsets;
  int off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const int c = t.dim(1);
    for (int n = 0; n < batch; ++n) {
      std::copy_n(t.data().data() + static_cast<std::size_t>(n) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(n) * total + off) * plane);
    }
    off += c;
  }
  auto backward = [=](Node<T>& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (!wants_grad(in)) continue;
      const int c = in->shape[1];
      T* dx = in->grad_buffer();
      for (int n = 0; n < batch; ++n) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * total + offsets[i]) * plane;
        T* dst = dx + static_cast<std::size_t>(n) * c * plane;
        for (std::size_t j = 0; j < c * plane; ++j) dst[j] += src[j];
      }
    }
  };
  return make_result<T>({batch, total, h, w}, std::move(out), "concat_channels", xs, backward);
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count) {
  require_rank(x.shape(), 4, "slice_channels", "input");
  const int batch = x.dim(0), channels = x.dim(1);
  if (start < 0 || count < 1 || start + count > channels) {
    raise(ErrorCode::kShape, "slice_channels: range [" + std::to_string(start) + ", " +
                                 std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch) * count * plane);
  for (int n = 0; n < batch; ++n) {
    std::copy_n(x.data().data() + (static_cast<std::size_t>(n) * channels + start) * plane,
                count * plane, out.data() + static_cast<std::size_t>(n) * count * plane);
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (int n = 0; n < batch; ++n) {
      const T* src = self.grad.data() + static_cast<std::size_t>(n) * count * plane;
      T* dst = dx + (static_cast<std::size_t>(n) * channels + start) * plane;
      for (std::size_t j = 0; j < count * plane; ++j) dst[j] += src[j];
    }
  };
  return make_result<T>({batch, count, x.dim(2), x.dim(3)}, std::move(out), "slice_channels", {x}, backward);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0 ? xd[i] : T(0);
  auto backward = [](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xn->data[i] > 0) dx[i] += self.grad[i];
    }
  };
  return make_result<T>(x.shape(), std::move(out), "relu", {x}, backward);
}

template <typename T>
Tensor<T> hardtanh(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(xd[i], T(-1), T(1));
  auto backward = [](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn->data[i];
      if (v > T(-1) && v < T(1)) dx[i] += self.grad[i];
    }
  };
  return make_result<T>(x.shape(), std::move(out), "hardtanh", {x}, backward);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int dim) {
  const int r = x.rank();
  const int d = dim < 0 ? dim + r : dim;
  if (d < 0 || d >= r) raise(ErrorCode::kShape, "softmax: dim " + std::to_string(dim) + " invalid for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < d; ++i) outer *= x.shape()[i];
  for (int i = d + 1; i < r; ++i) inner *= x.shape()[i];
  const std::size_t n = x.shape()[d];
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    const T* y = self.data.data();
    const T* dy = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          dx[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  };
  return make_result<T>(x.shape(), std::move(out), "softmax", {x}, backward);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int last_n, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  const int r = x.rank();
  if (last_n < 1 || last_n > r) {
    raise(ErrorCode::kShape, "layer_norm: last_n " + std::to_string(last_n) + " invalid for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, group = 1;
  for (int i = 0; i < r - last_n; ++i) outer *= x.shape()[i];
  for (int i = r - last_n; i < r; ++i) group *= x.shape()[i];
  const int affine_dim = x.shape()[r - last_n];
  const std::size_t inner = affine_dim ? group / affine_dim : 0;
  for (const Tensor<T>* p : {&gain, &bias}) {
    if (p->defined() && p->shape() != Shape{affine_dim}) {
      raise(ErrorCode::kShape, "layer_norm: affine parameter shape " + shape_str(p->shape()) +
                                   " expected (" + std::to_string(affine_dim) + ")");
    }
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(outer);
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = xd + o * group;
    double mu = 0;
    for (std::size_t i = 0; i < group; ++i) mu += src[i];
    mu /= static_cast<double>(group);
    double var = 0;
    for (std::size_t i = 0; i < group; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(group);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + eps));
    rstd[o] = rs;
    for (std::size_t i = 0; i < group; ++i) {
      const T xh = (src[i] - static_cast<T>(mu)) * rs;
      xhat[o * group + i] = xh;
      const std::size_t c = i / inner;
      const T g = gain.defined() ? gain.data()[c] : T(1);
      const T b = bias.defined() ? bias.data()[c] : T(0);
      out[o * group + i] = xh * g + b;
    }
  }
  auto backward = [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& gn = self.inputs[1];
    auto& bn = self.inputs[2];
    const T* dy = self.grad.data();
    if (wants_grad(gn) || wants_grad(bn)) {
      T* dg = wants_grad(gn) ? gn->grad_buffer() : nullptr;
      T* db = wants_grad(bn) ? bn->grad_buffer() : nullptr;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < group; ++i) {
          const std::size_t idx = o * group + i, c = i / inner;
          if (dg) dg[c] += dy[idx] * xhat[idx];
          if (db) db[c] += dy[idx];
        }
      }
    }
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    std::vector<T> dxh(group);
    for (std::size_t o = 0; o < outer; ++o) {
      T mean_d = 0, mean_dx = 0;
      for (std::size_t i = 0; i < group; ++i) {
        const std::size_t idx = o * group + i;
        const T g = gn ? gn->data[i / inner] : T(1);
        dxh[i] = dy[idx] * g;
        mean_d += dxh[i];
        mean_dx += dxh[i] * xhat[idx];
      }
      mean_d /= static_cast<T>(group);
      mean_dx /= static_cast<T>(group);
      for (std::size_t i = 0; i < group; ++i) {
        const std::size_t idx = o * group + i;
        dx[idx] += rstd[o] * (dxh[i] - mean_d - xhat[idx] * mean_dx);
      }
    }
  };
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {x, gain, bias}, backward);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState& state, bool training) {
  require_rank(x.shape(), 4, "batch_norm", "input");
  const int batch = x.dim(0), channels = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    raise(ErrorCode::kShape, "batch_norm: affine parameters must have shape (" + std::to_string(channels) + ")");
  }
  if (state.running_mean.size() != static_cast<std::size_t>(channels)) {
    raise(ErrorCode::kShape, "batch_norm: running statistics sized for " +
                                 std::to_string(state.running_mean.size()) + " channels, input has " +
                                 std::to_string(channels));
  }
  const std::size_t count = static_cast<std::size_t>(batch) * plane;
  std::vector<T> mean_c(channels), rstd(channels);
  const T* xd = x.data().data();
  for (int c = 0; c < channels; ++c) {
    double mu, var;
    if (training) {
      mu = 0;
      for (int n = 0; n < batch; ++n) {
        const T* src = xd + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mu += src[i];
      }
      mu /= static_cast<double>(count);
      var = 0;
      for (int n = 0; n < batch; ++n) {
        const T* src = xd + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mu) * (src[i] - mu);
      }
      const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : 0.0;
      var /= static_cast<double>(count);
      state.running_mean[c] = static_cast<float>((1 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] = static_cast<float>((1 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    mean_c[c] = static_cast<T>(mu);
    rstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      const T g = gamma.data()[c], b = beta.data()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (xd[base + i] - mean_c[c]) * rstd[c];
        xhat[base + i] = xh;
        out[base + i] = xh * g + b;
      }
    }
  }
  auto backward = [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& gn = self.inputs[1];
    auto& bn = self.inputs[2];
    const T* dy = self.grad.data();
    T* dx = wants_grad(xn) ? xn->grad_buffer() : nullptr;
    T* dg = wants_grad(gn) ? gn->grad_buffer() : nullptr;
    T* db = wants_grad(bn) ? bn->grad_buffer() : nullptr;
    for (int c = 0; c < channels; ++c) {
      T sum_dy = 0, sum_dy_xh = 0;
      for (int n = 0; n < batch; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += dy[base + i];
          sum_dy_xh += dy[base + i] * xhat[base + i];
        }
      }
      if (dg) dg[c] += sum_dy_xh;
      if (db) db[c] += sum_dy;
      if (!dx) continue;
      const T g = gn->data[c];
      const T mean_dy = sum_dy / static_cast<T>(count);
      const T mean_dy_xh = sum_dy_xh / static_cast<T>(count);
      for (int n = 0; n < batch; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (training) {
            dx[base + i] += g * rstd[c] * (dy[base + i] - mean_dy - xhat[base + i] * mean_dy_xh);
          } else {
            dx[base + i] += g * rstd[c] * dy[base + i];
          }
        }
      }
    }
  };
  return make_result<T>(x.shape(), std::move(out), "batch_norm", {x, gamma, beta}, backward);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto backward = [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      T* d = in->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  };
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, backward);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto backward = [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!wants_grad(in)) continue;
      T* d = in->grad_buffer();
      const T sign = k == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += sign * self.grad[i];
    }
  };
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, backward);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto backward = [](Node<T>& self) {
    auto& an = self.inputs[0];
    auto& bn = self.inputs[1];
    if (wants_grad(an)) {
      T* d = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bn->data[i];
    }
    if (wants_grad(bn)) {
      T* d = bn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * an->data[i];
    }
  };
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, backward);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto backward = [factor](Node<T>& self) {
    auto& an = self.inputs[0];
    if (!wants_grad(an)) return;
    T* d = an->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * factor;
  };
  return make_result<T>(a.shape(), std::move(out), "scale", {a}, backward);
}

template <typename T>
Tensor<T> mul_broadcast_channels(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank(x.shape(), 4, "mul_broadcast_channels", "input");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.shape() != Shape{batch, 1, h, wd}) {
    raise(ErrorCode::kShape, "mul_broadcast_channels: weight " + shape_str(w.shape()) +
                                 " does not broadcast onto " + shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  std::vector<T> out(x.numel());
  for (int n = 0; n < batch; ++n) {
    const T* wp = w.data().data() + n * plane;
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = x.data()[base + i] * wp[i];
    }
  }
  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& wn = self.inputs[1];
    T* dx = wants_grad(xn) ? xn->grad_buffer() : nullptr;
    T* dw = wants_grad(wn) ? wn->grad_buffer() : nullptr;
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T g = self.grad[base + i];
          if (dx) dx[base + i] += g * wn->data[n * plane + i];
          if (dw) dw[n * plane + i] += g * xn->data[base + i];
        }
      }
    }
  };
  return make_result<T>(x.shape(), std::move(out), "mul_broadcast_channels", {x, w}, backward);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto backward = [](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* d = xn->grad_buffer();
    for (std::size_t i = 0; i < xn->data.size(); ++i) d[i] += self.grad[0];
  };
  return make_result<T>({1}, {acc}, "sum", {x}, backward);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) raise(ErrorCode::kShape, "mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const std::vector<T>& weights) {
  if (weights.size() != x.numel()) {
    raise(ErrorCode::kShape, "weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                                 std::to_string(x.numel()) + " values");
  }
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.data()[i] * weights[i];
  auto backward = [weights](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* d = xn->grad_buffer();
    for (std::size_t i = 0; i < weights.size(); ++i) d[i] += self.grad[0] * weights[i];
  };
  return make_result<T>({1}, {acc}, "weighted_sum", {x}, backward);
}

#define PYSEG_INSTANTIATE(T)                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&); \
  template Tensor<T> avg_pool(const Tensor<T>&, int, int);                                        \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                           \
  template Tensor<T> bilinear_resize(const Tensor<T>&, int, int);                                 \
  template Tensor<T> max_pool2(const Tensor<T>&);                                                 \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> hardtanh(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&, int);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                BatchNormState&, bool);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> mul_broadcast_channels(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> weighted_sum(const Tensor<T>&, const std::vector<T>&);

PYSEG_INSTANTIATE(float)
PYSEG_INSTANTIATE(double)

#undef PYSEG_INSTANTIATE

}  // namespace pyseg
