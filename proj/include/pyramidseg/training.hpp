#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pyramidseg/data.hpp"
#include "pyramidseg/network.hpp"
#include "pyramidseg/rng.hpp"

namespace pyseg {

// alpha * CE + (1 - alpha) * (-log softDice). Soft Dice is averaged over the
// foreground classes 1..K-1, each (2*I + eps) / (P + G + eps).
// logits: (B,K,H,W); target: B*H*W labels in row-major order.
template <typename T>
Tensor<T> ce_log_dice_loss(const Tensor<T>& logits, const std::vector<int32_t>& target, double alpha,
                           double eps = 1e-6);

// lr_init * (1 - iter/total)^0.9. iter past total yields 0 and a warning on
// stderr.
double poly_lr(double lr_init, long iter, long total);

struct AugmentationSpec {
  double max_rotation_deg = 30.0;
  double brightness = 0.7;
  double contrast = 0.7;
  double saturation = 0.7;
  double blur_prob = 0.3;
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.2;
  double sharpen_prob = 0.3;
  double sharpen_min = 0.2;
  double sharpen_max = 1.0;
  double crop_scale_min = 0.75;
  double crop_scale_max = 1.0;

  static AugmentationSpec none();
  void validate() const;
};

// Rotates by angle_deg about the centre of a crop window of side
// crop_scale * extent centred at (cy, cx) (pixel units), resampling back to
// the original extent. Image bilinear, mask nearest, borders replicated.
SegmentationSample warp_sample(const SegmentationSample& s, double angle_deg, double crop_scale, double cy,
                               double cx);

SegmentationSample augment(const SegmentationSample& s, const AugmentationSpec& spec, Rng& rng);

enum class Optimizer { kSgdMomentum, kSgd };

struct TrainConfig {
  int batch_size = 4;
  double lr_init = 0.001;
  long total_iters = 200;
  double alpha = 0.5;
  uint64_t seed = 0;
  Optimizer optimizer = Optimizer::kSgdMomentum;
  double momentum = 0.9;
  AugmentationSpec augmentation;
  long val_every = 0;  // 0 disables periodic validation

  void validate() const;
};

struct TrainStep {
  long iter;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<double> losses;                      // one per iteration
  std::vector<std::pair<long, double>> val_dice;   // (iter, mean Dice %)
};

using StepCallback = std::function<void(const TrainStep&)>;

// Batches are drawn from seeded per-epoch shuffles; augmentation draws are
// keyed by (seed, iteration, slot), so a run is a pure function of its inputs.
TrainResult train(SegmentationNet<float>& net, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

// Stacks samples into a (B,3,H,W) batch and a flat label vector.
Tensor<float> stack_images(const std::vector<const SegmentationSample*>& batch);
std::vector<int32_t> stack_masks(const std::vector<const SegmentationSample*>& batch);

// Argmax predictions for each sample (inference mode, no graph).
std::vector<std::vector<int32_t>> predict(const SegmentationNet<float>& net,
                                          const std::vector<SegmentationSample>& samples, int batch_size = 4);

}  // namespace pyseg
