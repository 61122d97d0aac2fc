#include "pyramidseg/deform.hpp"

#include <cmath>

#include "gemm.hpp"

namespace pyseg {

namespace {

using detail::make_result;
using detail::wants_grad;

// Bilinear stencil of one sample point: four corner indices (-1 when outside
// the image) and the fractional parts.
struct Stencil {
  int idx[4];
  double ly, lx;
};

Stencil make_stencil(double py, double px, int h, int w) {
  Stencil s;
  const double fy = std::floor(py), fx = std::floor(px);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  s.ly = py - fy;
  s.lx = px - fx;
  const int ys[2] = {y0, y0 + 1};
  const int xs[2] = {x0, x0 + 1};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const bool inside = ys[a] >= 0 && ys[a] < h && xs[b] >= 0 && xs[b] < w;
      s.idx[a * 2 + b] = inside ? ys[a] * w + xs[b] : -1;
    }
  }
  return s;
}

template <typename T>
T stencil_value(const Stencil& s, const T* plane) {
  const T v[4] = {s.idx[0] >= 0 ? plane[s.idx[0]] : T(0), s.idx[1] >= 0 ? plane[s.idx[1]] : T(0),
                  s.idx[2] >= 0 ? plane[s.idx[2]] : T(0), s.idx[3] >= 0 ? plane[s.idx[3]] : T(0)};
  const T ly = static_cast<T>(s.ly), lx = static_cast<T>(s.lx);
  return (1 - ly) * ((1 - lx) * v[0] + lx * v[1]) + ly * ((1 - lx) * v[2] + lx * v[3]);
}

// Sample points for every (tap, pixel) of one batch item.
template <typename T>
std::vector<Stencil> stencils_for(const T* offsets, int k, int dilation, int h, int w) {
  const int taps = k * k, half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<Stencil> out(static_cast<std::size_t>(taps) * plane);
  for (int j = 0; j < taps; ++j) {
    const int ry = j / k - half, rx = j % k - half;
    const T* oy = offsets + (2 * j) * plane;
    const T* ox = offsets + (2 * j + 1) * plane;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        out[j * plane + p] = make_stencil(y + dilation * ry + static_cast<double>(oy[p]),
                                          x + dilation * rx + static_cast<double>(ox[p]), h, w);
      }
    }
  }
  return out;
}

template <typename T>
void deform_im2col(const T* x, int channels, int taps, std::size_t plane,
                   const std::vector<Stencil>& st, T* col) {
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + c * plane;
    for (int j = 0; j < taps; ++j) {
      T* dst = col + (static_cast<std::size_t>(c) * taps + j) * plane;
      const Stencil* s = st.data() + j * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = stencil_value(s[p], xc);
    }
  }
}

}  // namespace

template <typename T>
T bilinear_sample(const Tensor<T>& x, int n, int c, double py, double px) {
  const int h = x.dim(2), w = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const T* base = x.data().data() + (static_cast<std::size_t>(n) * x.dim(1) + c) * plane;
  return stencil_value(make_stencil(py, px, h, w), base);
}

template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dilation,
                        const Tensor<T>& offsets) {
  if (x.rank() != 4 || w.rank() != 4 || offsets.rank() != 4) {
    raise(ErrorCode::kShape, "deform_conv2d: input, weight and offsets must be rank 4");
  }
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int m = w.dim(0), k = w.dim(2);
  if (dilation <= 0) raise(ErrorCode::kConfig, "deform_conv2d: dilation must be positive");
  if (k % 2 == 0 || w.dim(3) != k) raise(ErrorCode::kShape, "deform_conv2d: kernel must be square and odd, got " + shape_str(w.shape()));
  if (w.dim(1) != channels) {
    raise(ErrorCode::kShape, "deform_conv2d: weight dim 1 (in_channels) expected " +
                                 std::to_string(channels) + ", got " + std::to_string(w.dim(1)));
  }
  if (b.defined() && b.shape() != Shape{m}) raise(ErrorCode::kShape, "deform_conv2d: bias shape " + shape_str(b.shape()));
  const int taps = k * k;
  const Shape want{batch, offset_channels(k), h, wd};
  if (offsets.shape() != want) {
    raise(ErrorCode::kShape, "deform_conv2d: offsets " + shape_str(offsets.shape()) + " expected " +
                                 shape_str(want));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * wd;
  const int kk = channels * taps;
  const int n_out = static_cast<int>(plane);

  std::vector<T> out(static_cast<std::size_t>(batch) * m * plane);
  std::vector<T> col(static_cast<std::size_t>(kk) * plane);
  for (int n = 0; n < batch; ++n) {
    const auto st = stencils_for(offsets.data().data() + n * offset_channels(k) * plane, k, dilation, h, wd);
    deform_im2col(x.data().data() + static_cast<std::size_t>(n) * channels * plane, channels, taps,
                  plane, st, col.data());
    T* dst = out.data() + static_cast<std::size_t>(n) * m * plane;
    detail::gemm(false, false, m, n_out, kk, T(1), w.data().data(), kk, col.data(), n_out, T(0), dst, n_out);
    if (b.defined()) {
      for (int o = 0; o < m; ++o) {
        const T bias = b.data()[o];
        for (std::size_t p = 0; p < plane; ++p) dst[o * plane + p] += bias;
      }
    }
  }

  auto backward = [=](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& wn = self.inputs[1];
    auto& bn = self.inputs[2];
    auto& on = self.inputs[3];
    const T* dy = self.grad.data();
    T* dx = wants_grad(xn) ? xn->grad_buffer() : nullptr;
    T* dw = wants_grad(wn) ? wn->grad_buffer() : nullptr;
    T* doff = wants_grad(on) ? on->grad_buffer() : nullptr;
    std::vector<T> colb(static_cast<std::size_t>(kk) * plane);
    for (int n = 0; n < batch; ++n) {
      const T* xs = xn->data.data() + static_cast<std::size_t>(n) * channels * plane;
      const T* dyn = dy + static_cast<std::size_t>(n) * m * plane;
      const auto st = stencils_for(on->data.data() + n * offset_channels(k) * plane, k, dilation, h, wd);
      if (dw) {
        deform_im2col(xs, channels, taps, plane, st, colb.data());
        detail::gemm(false, true, m, kk, n_out, T(1), dyn, n_out, colb.data(), n_out, T(1), dw, kk);
      }
      if (!dx && !doff) continue;
      detail::gemm(true, false, kk, n_out, m, T(1), wn->data.data(), kk, dyn, n_out, T(0), colb.data(), n_out);
      T* dxn = dx ? dx + static_cast<std::size_t>(n) * channels * plane : nullptr;
      T* doffn = doff ? doff + static_cast<std::size_t>(n) * offset_channels(k) * plane : nullptr;
      for (int c = 0; c < channels; ++c) {
        const T* xc = xs + c * plane;
        for (int j = 0; j < taps; ++j) {
          const T* g = colb.data() + (static_cast<std::size_t>(c) * taps + j) * plane;
          const Stencil* s = st.data() + j * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            const T gv = g[p];
            if (gv == T(0)) continue;
            const Stencil& sp = s[p];
            const T ly = static_cast<T>(sp.ly), lx = static_cast<T>(sp.lx);
            if (dxn) {
              T* dxc = dxn + c * plane;
              const T wts[4] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
              for (int q = 0; q < 4; ++q) {
                if (sp.idx[q] >= 0) dxc[sp.idx[q]] += gv * wts[q];
              }
            }
            if (doffn) {
              const T v0 = sp.idx[0] >= 0 ? xc[sp.idx[0]] : T(0);
              const T v1 = sp.idx[1] >= 0 ? xc[sp.idx[1]] : T(0);
              const T v2 = sp.idx[2] >= 0 ? xc[sp.idx[2]] : T(0);
              const T v3 = sp.idx[3] >= 0 ? xc[sp.idx[3]] : T(0);
              const T d_py = (1 - lx) * (v2 - v0) + lx * (v3 - v1);
              const T d_px = (1 - ly) * (v1 - v0) + ly * (v3 - v2);
              doffn[(2 * j) * plane + p] += gv * d_py;
              doffn[(2 * j + 1) * plane + p] += gv * d_px;
            }
          }
        }
      }
    }
    if (wants_grad(bn)) {
      T* db = bn->grad_buffer();
      for (int n = 0; n < batch; ++n) {
        for (int o = 0; o < m; ++o) {
          const T* src = dy + (static_cast<std::size_t>(n) * m + o) * plane;
          T acc = 0;
          for (std::size_t p = 0; p < plane; ++p) acc += src[p];
          db[o] += acc;
        }
      }
    }
  };
  return make_result<T>({batch, m, h, wd}, std::move(out), "deform_conv2d", {x, w, b, offsets}, backward);
}

int offset_head_kernel(int dilation) {
  switch (dilation) {
    case 3: return 9;
    case 6: return 15;
    default:
      raise(ErrorCode::kConfig, "offset_head: unsupported dilation " + std::to_string(dilation) +
                                    " (expected 3 or 6)");
  }
}

template <typename T>
Tensor<T> offset_head(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dilation) {
  const int k = offset_head_kernel(dilation);
  const auto spec = ConvSpec::same(k, 1, offset_channels(3));
  return hardtanh(conv2d(x, w, b, spec));
}

template <typename T>
TriBranch<T> shared_tri_branch(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               const Tensor<T>& offsets_mid, const Tensor<T>& offsets_far) {
  if (w.rank() != 4) raise(ErrorCode::kShape, "shared_tri_branch: weight must be rank 4");
  TriBranch<T> out;
  out.near = conv2d(x, w, b, ConvSpec::same(w.dim(2), 1, w.dim(0)));
  out.mid = deform_conv2d(x, w, b, 3, offsets_mid);
  out.far = deform_conv2d(x, w, b, 6, offsets_far);
  return out;
}

template float bilinear_sample(const Tensor<float>&, int, int, double, double);
template double bilinear_sample(const Tensor<double>&, int, int, double, double);
template Tensor<float> deform_conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int, const Tensor<float>&);
template Tensor<double> deform_conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int, const Tensor<double>&);
template Tensor<float> offset_head(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> offset_head(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int);
template TriBranch<float> shared_tri_branch(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template TriBranch<double> shared_tri_branch(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace pyseg
