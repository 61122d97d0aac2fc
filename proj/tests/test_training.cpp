#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "pyramidseg/gradcheck.hpp"
#include "pyramidseg/training.hpp"

using namespace pyseg;

namespace {

// Plain re-statement of the loss for (B,K,H,W) logits.
double loss_oracle(const TensorD& logits, const std::vector<int32_t>& target, double alpha, double eps = 1e-6) {
  const int B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  double ce = 0;
  std::vector<double> inter(K, 0), psum(K, 0), gsum(K, 0);
  for (int n = 0; n < B; ++n) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double m = -1e300;
        for (int k = 0; k < K; ++k) m = std::max(m, logits.at(n, k, y, x));
        double z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(logits.at(n, k, y, x) - m);
        const int t = target[(n * H + y) * W + x];
        ce -= logits.at(n, t, y, x) - m - std::log(z);
        for (int k = 0; k < K; ++k) {
          const double p = std::exp(logits.at(n, k, y, x) - m) / z;
          psum[k] += p;
          if (k == t) {
            inter[k] += p;
            gsum[k] += 1;
          }
        }
      }
    }
  }
  ce /= B * H * W;
  double dice = 0;
  for (int k = 1; k < K; ++k) dice += (2 * inter[k] + eps) / (psum[k] + gsum[k] + eps);
  dice /= K - 1;
  return alpha * ce + (1 - alpha) * -std::log(dice);
}

TensorD random(const Shape& shape, Rng& rng, double lo = -2, double hi = 2) {
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<int32_t> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int32_t> out(n);
  for (auto& v : out) v = static_cast<int32_t>(rng.below(k));
  return out;
}

SegmentationSample ramp_sample(int h, int w) {
  SegmentationSample s;
  s.height = h;
  s.width = w;
  s.image.resize(3 * h * w);
  s.mask.resize(h * w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h * w; ++i) s.image[c * h * w + i] = static_cast<float>((i + 7 * c) % 17) / 16.0f;
  for (int i = 0; i < h * w; ++i) s.mask[i] = (i / w + i % w) % 3;
  return s;
}

std::vector<float> snapshot(SegmentationNet<float>& net) {
  std::vector<float> out;
  for (const auto& e : net.params().entries()) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

// PVF needs the 64-pixel input; the plain decoder also runs at 32.
std::vector<SegmentationSample> tiny_set(int n, int size = 64) { return generate_synthetic(3, n, size, 3); }

NetworkConfig tiny_net(Variant variant = Variant::kDeepPyramidPlus) {
  NetworkConfig nc;
  nc.variant = variant;
  nc.input_size = variant == Variant::kUnetPlus ? 32 : 64;
  nc.base_width = 8;
  nc.num_classes = 3;
  nc.seed = 4;
  return nc;
}

}  // namespace

TEST_CASE("uniform binary logits give ln 2 cross-entropy") {
  const TensorD logits({2, 2, 3, 3});
  Rng rng(1);
  const auto target = random_labels(18, 2, rng);
  CHECK(ce_log_dice_loss(logits, target, 1.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss matches the oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 6; ++trial) {
    const int K = 2 + trial % 3;
    auto logits = random({2, K, 4, 5}, rng);
    auto target = random_labels(40, K, rng);
    for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
      CHECK(ce_log_dice_loss(logits, target, alpha).item() ==
            doctest::Approx(loss_oracle(logits, target, alpha)).epsilon(1e-10));
    }
  }
}

TEST_CASE("loss is non-negative and vanishes on saturated truth") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = random({1, 3, 4, 4}, rng, -5, 5);
    CHECK(ce_log_dice_loss(logits, random_labels(16, 3, rng), rng.uniform()).item() >= 0);
  }
  auto target = random_labels(16, 3, rng);
  target[0] = 1;
  target[1] = 2;
  TensorD sure({1, 3, 4, 4});
  for (int i = 0; i < 16; ++i) sure.mutable_data()[target[i] * 16 + i] = 60.0;
  CHECK(ce_log_dice_loss(sure, target, 0.5).item() < 1e-9);
  // Moving probability off the truth raises the loss.
  CHECK(ce_log_dice_loss(TensorD({1, 3, 4, 4}), target, 0.5).item() > 0.5);
}

TEST_CASE("loss errors") {
  TensorD logits({1, 3, 2, 2});
  auto code = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInternal;
  };
  CHECK(code([&] { ce_log_dice_loss(logits, {0, 1, 3, 0}, 0.5); }) == ErrorCode::kLabelRange);
  CHECK(code([&] { ce_log_dice_loss(logits, {0, 1, -1, 0}, 0.5); }) == ErrorCode::kLabelRange);
  CHECK(code([&] { ce_log_dice_loss(logits, {0, 1, 2}, 0.5); }) == ErrorCode::kShape);
  CHECK(code([&] { ce_log_dice_loss(logits, {0, 1, 2, 0}, 1.5); }) == ErrorCode::kConfig);
}

TEST_CASE("loss gradient") {
  for (const auto& r : run_gradcheck("loss", 0)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed);
  }
}

TEST_CASE("poly schedule") {
  CHECK(poly_lr(0.001, 0, 200) == 0.001);
  CHECK(poly_lr(0.001, 200, 200) == 0.0);
  CHECK(std::abs(poly_lr(0.001, 100, 200) - 5.3589e-4) < 1e-8);
  CHECK(poly_lr(0.001, 100, 200) == doctest::Approx(0.001 * std::pow(0.5, 0.9)).epsilon(1e-14));
  double prev = 1;
  for (long i = 0; i <= 200; ++i) {
    const double lr = poly_lr(0.001, i, 200);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(poly_lr(0.001, 250, 200) == 0.0);
  CHECK_THROWS_AS(poly_lr(0.001, -1, 200), Error);
  CHECK_THROWS_AS(poly_lr(0.001, 0, 0), Error);
}

TEST_CASE("quarter turn permutes pixels") {
  for (int n : {2, 4, 5}) {
    const auto s = ramp_sample(n, n);
    const auto r = warp_sample(s, 90, 1.0, n / 2.0, n / 2.0);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        CHECK(r.mask[y * n + x] == s.mask[x * n + (n - 1 - y)]);
        for (int c = 0; c < 3; ++c)
          CHECK(r.image[c * n * n + y * n + x] == doctest::Approx(s.image[c * n * n + x * n + (n - 1 - y)]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("identity warp and empty augmentation") {
  const auto s = ramp_sample(6, 7);
  const auto w = warp_sample(s, 0, 1.0, 3.0, 3.5);
  CHECK(w.image == s.image);
  CHECK(w.mask == s.mask);
  Rng rng(5);
  const auto a = augment(s, AugmentationSpec::none(), rng);
  CHECK(a.image == s.image);
  CHECK(a.mask == s.mask);
}

TEST_CASE("augmentation properties") {
  const auto data = generate_synthetic(11, 24, 48, 4);
  AugmentationSpec spec;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng = Rng(9).split(i);
    const auto& s = data[i];
    const auto a = augment(s, spec, rng);
    CHECK(a.height == s.height);
    CHECK(a.width == s.width);
    CHECK(a.mask.size() == s.mask.size());
    CHECK(a.image.size() == s.image.size());
    const std::set<int32_t> before(s.mask.begin(), s.mask.end()), after(a.mask.begin(), a.mask.end());
    CHECK(std::includes(before.begin(), before.end(), after.begin(), after.end()));
    for (float v : a.image) CHECK((v >= 0.0f && v <= 1.0f));
  }
  AugmentationSpec bad;
  bad.max_rotation_deg = 45;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = AugmentationSpec{};
  bad.crop_scale_min = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("geometric warp keeps label identity") {
  // A mask equal to a function of the image moves with it under the warp.
  auto s = ramp_sample(9, 9);
  for (int i = 0; i < 81; ++i) {
    const int label = i % 4 == 0 ? 1 : 0;
    s.mask[i] = label;
    for (int c = 0; c < 3; ++c) s.image[c * 81 + i] = static_cast<float>(label);
  }
  const auto r = warp_sample(s, 90, 1.0, 4.5, 4.5);
  for (int i = 0; i < 81; ++i) CHECK(r.mask[i] == static_cast<int>(std::lround(r.image[i])));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  SegmentationNet<float> net(tiny_net());
  const auto before = snapshot(net);
  TrainConfig cfg;
  cfg.lr_init = 0;
  cfg.total_iters = 3;
  cfg.batch_size = 2;
  train(net, tiny_set(8), {}, cfg);
  CHECK(snapshot(net) == before);
}

TEST_CASE("training is a pure function of its inputs") {
  const auto data = tiny_set(8);
  TrainConfig cfg;
  cfg.total_iters = 3;
  cfg.batch_size = 2;
  cfg.seed = 17;
  SegmentationNet<float> a(tiny_net()), b(tiny_net());
  const auto ra = train(a, data, {}, cfg);
  const auto rb = train(b, data, {}, cfg);
  CHECK(ra.losses == rb.losses);
  CHECK(snapshot(a) == snapshot(b));
  cfg.seed = 18;
  SegmentationNet<float> c(tiny_net());
  train(c, data, {}, cfg);
  CHECK(snapshot(c) != snapshot(a));
}

TEST_CASE("short run descends") {
  const auto data = tiny_set(16, 32);
  TrainConfig cfg;
  cfg.total_iters = 40;
  cfg.batch_size = 2;
  cfg.lr_init = 0.01;
  cfg.augmentation = AugmentationSpec::none();
  cfg.val_every = 20;
  SegmentationNet<float> net(tiny_net(Variant::kUnetPlus));
  long calls = 0;
  const auto r = train(net, data, {data.begin(), data.begin() + 4}, cfg, [&](const TrainStep& s) {
    CHECK(s.iter == calls);
    CHECK(s.lr == poly_lr(cfg.lr_init, s.iter, cfg.total_iters));
    ++calls;
  });
  CHECK(calls == 40);
  REQUIRE(r.losses.size() == 40);
  auto mean = [&](int from) { return (r.losses[from] + r.losses[from + 1] + r.losses[from + 2] + r.losses[from + 3] + r.losses[from + 4]) / 5; };
  CHECK(mean(35) < mean(0));
  REQUIRE(r.val_dice.size() == 2);
  CHECK(r.val_dice[0].first == 20);
  CHECK(r.val_dice[1].first == 40);
}

TEST_CASE("divergence is reported with context") {
  const auto data = tiny_set(4, 32);
  TrainConfig cfg;
  cfg.total_iters = 30;
  cfg.batch_size = 2;
  cfg.lr_init = 1e8;
  cfg.augmentation = AugmentationSpec::none();
  SegmentationNet<float> net(tiny_net(Variant::kUnetPlus));
  try {
    train(net, data, {}, cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
    CHECK(std::string(e.what()).find("synth_3_") != std::string::npos);
  }
}

TEST_CASE("train config validation") {
  SegmentationNet<float> net(tiny_net());
  const auto data = tiny_set(2);
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(net, data, {}, cfg), Error);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(train(net, data, {}, cfg), Error);
  CHECK_THROWS_AS(train(net, {}, {}, TrainConfig{}), Error);
  CHECK_THROWS_AS(train(net, generate_synthetic(0, 2, 48, 3), {}, TrainConfig{}), Error);
}
