#include "pyramidseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "pyramidseg/metrics.hpp"

namespace pyseg {

using detail::make_result;
using detail::wants_grad;

template <typename T>
Tensor<T> ce_log_dice_loss(const Tensor<T>& logits, const std::vector<int32_t>& target, double alpha, double eps) {
  if (logits.rank() != 4) raise(ErrorCode::kShape, "loss expects (B,K,H,W) logits, got " + shape_str(logits.shape()));
  if (alpha < 0 || alpha > 1) raise(ErrorCode::kConfig, "loss alpha must lie in [0, 1]");
  const int B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t N = plane * B;
  if (target.size() != N) {
    raise(ErrorCode::kShape, "target has " + std::to_string(target.size()) + " labels for " + std::to_string(N) +
                                 " pixels");
  }
  if (K < 2) raise(ErrorCode::kShape, "loss needs at least 2 classes");
  for (std::size_t i = 0; i < N; ++i) {
    if (target[i] < 0 || target[i] >= K) {
      const std::size_t n = i / plane, r = i % plane;
      raise(ErrorCode::kLabelRange, "target pixel (n=" + std::to_string(n) + ", y=" + std::to_string(r / W) +
                                        ", x=" + std::to_string(r % W) + ") has label " +
                                        std::to_string(target[i]) + ", expected < " + std::to_string(K));
    }
  }

  const T* z = logits.data().data();
  auto prob = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * K * plane);
  double ce = 0;
  std::vector<double> inter(K, 0), pred_sum(K, 0), gt_sum(K, 0);
  for (int n = 0; n < B; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * K * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = z[base + i];
      for (int c = 1; c < K; ++c) mx = std::max(mx, static_cast<double>(z[base + c * plane + i]));
      double total = 0;
      for (int c = 0; c < K; ++c) total += std::exp(z[base + c * plane + i] - mx);
      const int y = target[n * plane + i];
      ce += mx + std::log(total) - z[base + y * plane + i];
      for (int c = 0; c < K; ++c) {
        const double p = std::exp(z[base + c * plane + i] - mx) / total;
        (*prob)[base + c * plane + i] = p;
        pred_sum[c] += p;
        if (c == y) inter[c] += p;
      }
      gt_sum[y] += 1;
    }
  }
  ce /= static_cast<double>(N);

  const int F = K - 1;
  std::vector<double> dice_c(K, 0);
  double dice = 0;
  for (int c = 1; c < K; ++c) {
    dice_c[c] = (2 * inter[c] + eps) / (pred_sum[c] + gt_sum[c] + eps);
    dice += dice_c[c] / F;
  }
  const bool use_dice = alpha < 1;
  const double loss = alpha * ce + (use_dice ? (1 - alpha) * -std::log(dice) : 0.0);

  auto backward = [=, target = target](Node<T>& self) {
    auto& xn = self.inputs[0];
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer();
    const double g = self.grad[0];
    // d(-log D)/dp_c for every foreground class: coefficient and per-class
    // offset, since dD_c/dp_c = (2[y==c] - D_c) / (P_c + G_c + eps).
    std::vector<double> coef(K, 0);
    if (use_dice) {
      for (int c = 1; c < K; ++c) coef[c] = -(1 - alpha) / (dice * F) / (pred_sum[c] + gt_sum[c] + eps);
    }
    std::vector<double> gp(K);
    for (int n = 0; n < B; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * K * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const int y = target[n * plane + i];
        double dot = 0;
        for (int c = 0; c < K; ++c) {
          gp[c] = c == 0 ? 0.0 : coef[c] * ((c == y ? 2.0 : 0.0) - dice_c[c]);
          dot += (*prob)[base + c * plane + i] * gp[c];
        }
        for (int c = 0; c < K; ++c) {
          const double p = (*prob)[base + c * plane + i];
          const double d_ce = alpha / static_cast<double>(N) * (p - (c == y ? 1.0 : 0.0));
          dx[base + c * plane + i] += static_cast<T>(g * (d_ce + p * (gp[c] - dot)));
        }
      }
    }
  };
  return make_result<T>({1}, {static_cast<T>(loss)}, "ce_log_dice_loss", {logits}, backward);
}

template Tensor<float> ce_log_dice_loss(const Tensor<float>&, const std::vector<int32_t>&, double, double);
template Tensor<double> ce_log_dice_loss(const Tensor<double>&, const std::vector<int32_t>&, double, double);

double poly_lr(double lr_init, long iter, long total) {
  if (total < 1) raise(ErrorCode::kConfig, "poly_lr needs total >= 1");
  if (iter < 0) raise(ErrorCode::kInvalidArgument, "poly_lr: negative iteration");
  if (iter > total) {
    std::cerr << "warning: poly_lr iteration " << iter << " exceeds total " << total << ", using lr 0\n";
    return 0.0;
  }
  return lr_init * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), 0.9);
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentationSpec AugmentationSpec::none() {
  AugmentationSpec s;
  s.max_rotation_deg = 0;
  s.brightness = s.contrast = s.saturation = 0;
  s.blur_prob = 0;
  s.sharpen_prob = 0;
  s.crop_scale_min = s.crop_scale_max = 1.0;
  return s;
}

void AugmentationSpec::validate() const {
  if (max_rotation_deg < 0 || max_rotation_deg > 30) raise(ErrorCode::kConfig, "max rotation must lie in [0, 30]");
  if (brightness < 0 || contrast < 0 || saturation < 0) raise(ErrorCode::kConfig, "jitter strengths must be >= 0");
  if (blur_prob < 0 || blur_prob > 1 || sharpen_prob < 0 || sharpen_prob > 1) {
    raise(ErrorCode::kConfig, "augmentation probabilities must lie in [0, 1]");
  }
  if (blur_sigma_min <= 0 || blur_sigma_max < blur_sigma_min) raise(ErrorCode::kConfig, "bad blur sigma range");
  if (sharpen_min < 0 || sharpen_max < sharpen_min) raise(ErrorCode::kConfig, "bad sharpen range");
  if (crop_scale_min <= 0 || crop_scale_max > 1 || crop_scale_max < crop_scale_min) {
    raise(ErrorCode::kConfig, "crop scale range must satisfy 0 < min <= max <= 1");
  }
}

SegmentationSample warp_sample(const SegmentationSample& s, double angle_deg, double crop_scale, double cy,
                               double cx) {
  const int H = s.height, W = s.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  SegmentationSample out = s;
  const double theta = angle_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double u = (y + 0.5 - H / 2.0) * crop_scale;
      const double v = (x + 0.5 - W / 2.0) * crop_scale;
      const double sy = std::clamp(cy + cs * u + sn * v - 0.5, 0.0, H - 1.0);
      const double sx = std::clamp(cx - sn * u + cs * v - 0.5, 0.0, W - 1.0);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double ty = sy - y0, tx = sx - x0;
      const std::size_t o = static_cast<std::size_t>(y) * W + x;
      for (int c = 0; c < 3; ++c) {
        const float* p = s.image.data() + c * plane;
        const double top = (1 - tx) * p[y0 * W + x0] + tx * p[y0 * W + x1];
        const double bot = (1 - tx) * p[y1 * W + x0] + tx * p[y1 * W + x1];
        out.image[c * plane + o] = static_cast<float>((1 - ty) * top + ty * bot);
      }
      const int ny = std::min(static_cast<int>(std::floor(sy + 0.5)), H - 1);
      const int nx = std::min(static_cast<int>(std::floor(sx + 0.5)), W - 1);
      out.mask[o] = s.mask[static_cast<std::size_t>(ny) * W + nx];
    }
  }
  return out;
}

namespace {

void clamp_unit(std::vector<float>& v) {
  for (float& x : v) x = std::clamp(x, 0.0f, 1.0f);
}

std::vector<float> gray_of(const std::vector<float>& img, std::size_t plane) {
  std::vector<float> g(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    g[i] = 0.299f * img[i] + 0.587f * img[plane + i] + 0.114f * img[2 * plane + i];
  }
  return g;
}

}  // namespace

SegmentationSample augment(const SegmentationSample& s, const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  const int H = s.height, W = s.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  // Every draw happens unconditionally so the stream layout does not depend
  // on which transforms fire.
  const double scale = rng.uniform(spec.crop_scale_min, spec.crop_scale_max);
  const double ry = rng.uniform(), rx = rng.uniform();
  const double angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg);
  const double fb = rng.uniform(1 - spec.brightness, 1 + spec.brightness);
  const double fc = rng.uniform(1 - spec.contrast, 1 + spec.contrast);
  const double fs = rng.uniform(1 - spec.saturation, 1 + spec.saturation);
  const bool blur = rng.uniform() < spec.blur_prob;
  const double sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max);
  const bool sharpen = rng.uniform() < spec.sharpen_prob;
  const double amount = rng.uniform(spec.sharpen_min, spec.sharpen_max);

  const double half_h = scale * H / 2.0, half_w = scale * W / 2.0;
  const double cy = half_h + ry * (H - 2 * half_h);
  const double cx = half_w + rx * (W - 2 * half_w);
  SegmentationSample out = (scale == 1.0 && angle == 0.0) ? s : warp_sample(s, angle, scale, cy, cx);

  auto& img = out.image;
  if (spec.brightness > 0) {
    for (float& v : img) v = static_cast<float>(v * std::max(0.0, fb));
    clamp_unit(img);
  }
  if (spec.contrast > 0) {
    const auto g = gray_of(img, plane);
    const double m = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(plane);
    for (float& v : img) v = static_cast<float>(m + std::max(0.0, fc) * (v - m));
    clamp_unit(img);
  }
  if (spec.saturation > 0) {
    const auto g = gray_of(img, plane);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        float& v = img[c * plane + i];
        v = static_cast<float>(g[i] + std::max(0.0, fs) * (v - g[i]));
      }
    }
    clamp_unit(img);
  }
  if (blur) gaussian_blur_planes(img, 3, H, W, sigma);
  if (sharpen) {
    auto soft = img;
    gaussian_blur_planes(soft, 3, H, W, 1.0);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(img[i] + amount * (img[i] - soft[i]));
    clamp_unit(img);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

void TrainConfig::validate() const {
  if (batch_size < 1) raise(ErrorCode::kConfig, "batch size must be >= 1");
  if (!(lr_init >= 0)) raise(ErrorCode::kConfig, "learning rate must be >= 0");
  if (total_iters < 0) raise(ErrorCode::kConfig, "iteration count must be >= 0");
  if (alpha < 0 || alpha > 1) raise(ErrorCode::kConfig, "loss alpha must lie in [0, 1]");
  if (momentum < 0 || momentum >= 1) raise(ErrorCode::kConfig, "momentum must lie in [0, 1)");
  augmentation.validate();
}

Tensor<float> stack_images(const std::vector<const SegmentationSample*>& batch) {
  if (batch.empty()) raise(ErrorCode::kInvalidArgument, "empty batch");
  const int H = batch[0]->height, W = batch[0]->width;
  std::vector<float> data;
  data.reserve(batch.size() * 3 * H * W);
  for (const auto* s : batch) {
    if (s->height != H || s->width != W) raise(ErrorCode::kShape, "batch samples differ in extent");
    data.insert(data.end(), s->image.begin(), s->image.end());
  }
  return Tensor<float>({static_cast<int>(batch.size()), 3, H, W}, std::move(data));
}

std::vector<int32_t> stack_masks(const std::vector<const SegmentationSample*>& batch) {
  std::vector<int32_t> out;
  for (const auto* s : batch) out.insert(out.end(), s->mask.begin(), s->mask.end());
  return out;
}

std::vector<std::vector<int32_t>> predict(const SegmentationNet<float>& net,
                                          const std::vector<SegmentationSample>& samples, int batch_size) {
  NoGradGuard guard;
  std::vector<std::vector<int32_t>> out;
  const int K = net.config().num_classes;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const SegmentationSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
    const auto logits = net.forward(stack_images(batch), false);
    const int H = logits.dim(2), W = logits.dim(3);
    const std::size_t per = static_cast<std::size_t>(K) * H * W;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::vector<float> one(logits.data().begin() + b * per, logits.data().begin() + (b + 1) * per);
      out.push_back(argmax_labels(one, K, H, W));
    }
  }
  return out;
}

namespace {

double mean_dice(const SegmentationNet<float>& net, const std::vector<SegmentationSample>& samples) {
  const auto preds = predict(net, samples);
  ConfusionCounts counts(net.config().num_classes);
  for (std::size_t i = 0; i < samples.size(); ++i) counts.accumulate(preds[i], samples[i].mask);
  return iou_dice(counts, static_cast<int>(samples.size())).mean_dice;
}

}  // namespace

TrainResult train(SegmentationNet<float>& net, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  if (train_set.empty()) raise(ErrorCode::kInvalidArgument, "training set is empty");
  const int S = net.config().input_size;
  for (const auto& s : train_set) {
    if (s.height != S || s.width != S) {
      raise(ErrorCode::kShape, "sample " + s.id + " is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                                   ", model expects " + std::to_string(S) + "x" + std::to_string(S));
    }
  }
  const Rng root(cfg.seed);
  const Rng shuffle_root = root.split(1);
  const Rng augment_root = root.split(2);

  auto& entries = net.params().entries();
  std::vector<std::vector<float>> velocity(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) velocity[i].assign(entries[i].value.numel(), 0.0f);

  std::vector<std::size_t> order(train_set.size());
  std::size_t cursor = order.size();
  long epoch = -1;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      ++epoch;
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng r = shuffle_root.split(static_cast<uint64_t>(epoch));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult result;
  for (long iter = 0; iter < cfg.total_iters; ++iter) {
    const double lr = poly_lr(cfg.lr_init, iter, cfg.total_iters);
    std::vector<SegmentationSample> batch;
    std::vector<std::size_t> ids;
    for (int j = 0; j < cfg.batch_size; ++j) {
      const std::size_t idx = next_index();
      ids.push_back(idx);
      Rng r = augment_root.split(static_cast<uint64_t>(iter)).split(static_cast<uint64_t>(j));
      batch.push_back(augment(train_set[idx], cfg.augmentation, r));
    }
    std::vector<const SegmentationSample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);

    net.params().zero_grad();
    const auto logits = net.forward(stack_images(ptrs), true);
    const auto loss = ce_log_dice_loss(logits, stack_masks(ptrs), cfg.alpha);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite loss at iter " << iter << " (lr " << lr << ", batch ids";
      for (auto i : ids) msg << ' ' << train_set[i].id;
      msg << ")";
      raise(ErrorCode::kNumeric, msg.str());
    }
    loss.backward();

    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor<float> w = entries[p].value;
      if (!w.has_grad()) continue;
      auto g = w.grad();
      auto data = w.mutable_data();
      auto& v = velocity[p];
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (cfg.optimizer == Optimizer::kSgdMomentum) {
          v[i] = static_cast<float>(cfg.momentum) * v[i] + g[i];
          data[i] -= static_cast<float>(lr) * v[i];
        } else {
          data[i] -= static_cast<float>(lr) * g[i];
        }
      }
    }
    result.losses.push_back(value);
    if (on_step) on_step({iter, lr, value});
    const bool last = iter + 1 == cfg.total_iters;
    if (!val_set.empty() && cfg.val_every > 0 && ((iter + 1) % cfg.val_every == 0 || last)) {
      result.val_dice.emplace_back(iter + 1, mean_dice(net, val_set));
    }
  }
  net.params().zero_grad();
  return result;
}

}  // namespace pyseg
