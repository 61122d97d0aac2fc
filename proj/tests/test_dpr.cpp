#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "pyramidseg/dpr.hpp"
#include "pyramidseg/gradcheck.hpp"

using namespace pyseg;

namespace {

TensorD random(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

TensorD copy(const TensorD& x, bool grad = false) {
  return TensorD(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), grad);
}

void set_descriptor(ConvLayer<double>& d, double weight, double bias) {
  std::fill(d.weight.mutable_data().begin(), d.weight.mutable_data().end(), weight);
  d.bias.mutable_data()[0] = bias;
}

}  // namespace

TEST_CASE("dpr config validation") {
  CHECK_NOTHROW(DprConfig{32, 16, 16}.validate());
  CHECK(DprConfig{32, 16, 16}.concat_channels() == 48);
  for (const DprConfig& bad : {DprConfig{0, 4, 4}, DprConfig{4, -1, 4}, DprConfig{4, 4, 0}, DprConfig{4, 4, 9}}) {
    try {
      bad.validate();
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kConfig);
    }
  }
}

TEST_CASE("dpr shape contract") {
  ParamSet<double> params;
  Rng rng(1);
  DprBlock<double> block(params, "dpr", DprConfig{32, 16, 16}, rng);
  auto y = block.forward(random({1, 32, 8, 8}, rng), random({1, 16, 16, 16}, rng));
  CHECK(y.shape() == Shape{1, 16, 16, 16});
  auto t = block.forward_trace(random({2, 32, 4, 5}, rng), random({2, 16, 8, 10}, rng));
  CHECK(t.offsets_mid.shape() == Shape{2, 18, 8, 10});
  CHECK(t.offsets_far.shape() == Shape{2, 18, 8, 10});
  CHECK(t.ffd.weights.shape() == Shape{2, 3, 8, 10});
  for (double v : t.output.data()) CHECK(v >= 0.0);

  for (const auto& [dec, skip] : {std::pair{Shape{1, 32, 8, 8}, Shape{1, 16, 15, 16}},
                                  std::pair{Shape{1, 32, 8, 8}, Shape{1, 8, 16, 16}},
                                  std::pair{Shape{2, 32, 8, 8}, Shape{1, 16, 16, 16}}}) {
    try {
      block.forward(TensorD(dec), TensorD(skip));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kShape);
    }
  }
}

TEST_CASE("offset heads start at zero and are sized for 3x3 taps") {
  ParamSet<double> params;
  Rng rng(2);
  DprBlock<double> block(params, "dpr", DprConfig{8, 4, 6}, rng);
  CHECK(block.head_mid.weight.shape() == Shape{18, 12, 9, 9});
  CHECK(block.head_far.weight.shape() == Shape{18, 12, 15, 15});
  auto t = block.forward_trace(random({1, 8, 6, 6}, rng), random({1, 4, 12, 12}, rng));
  for (const auto* off : {&t.offsets_mid, &t.offsets_far})
    CHECK(std::all_of(off->data().begin(), off->data().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("ffd_fuse examples") {
  ParamSet<double> params;
  Rng rng(3);
  DprBlock<double> block(params, "dpr", DprConfig{4, 4, 4}, rng);
  auto& desc = block.descriptors;
  std::vector<TensorD> branches{random({1, 4, 3, 2}, rng), random({1, 4, 3, 2}, rng), random({1, 4, 3, 2}, rng)};

  SUBCASE("identical logits give the plain mean") {
    for (auto& d : desc) set_descriptor(d, 0.0, 0.25);
    auto r = ffd_fuse(branches, desc);
    for (std::size_t i = 0; i < r.fused.numel(); ++i) {
      const double mean = (branches[0].data()[i] + branches[1].data()[i] + branches[2].data()[i]) / 3;
      CHECK(r.fused.data()[i] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("saturated logit selects its branch") {
    set_descriptor(desc[0], 0.0, 1000.0);
    set_descriptor(desc[1], 0.0, 0.0);
    set_descriptor(desc[2], 0.0, 0.0);
    auto r = ffd_fuse(branches, desc);
    for (int i = 0; i < 6; ++i) CHECK(r.weights.data()[i] > 1 - 1e-6);
    for (std::size_t i = 0; i < r.fused.numel(); ++i) CHECK(std::abs(r.fused.data()[i] - branches[0].data()[i]) < 1e-6);
  }
  SUBCASE("per-pixel softmax oracle") {
    std::vector<TensorD> two{random({1, 3, 1, 2}, rng), random({1, 3, 1, 2}, rng), random({1, 3, 1, 2}, rng)};
    DprBlock<double> small(params, "small", DprConfig{2, 2, 3}, rng);
    auto r = ffd_fuse(two, small.descriptors);
    for (int px = 0; px < 2; ++px) {
      double logit[3], total = 0;
      for (int i = 0; i < 3; ++i) {
        logit[i] = small.descriptors[i].bias.data()[0];
        for (int c = 0; c < 3; ++c) logit[i] += small.descriptors[i].weight.data()[c] * two[i].at(0, c, 0, px);
      }
      const double top = std::max({logit[0], logit[1], logit[2]});
      for (double& l : logit) total += std::exp(l - top);
      for (int c = 0; c < 3; ++c) {
        double expected = 0;
        for (int i = 0; i < 3; ++i) expected += std::exp(logit[i] - top) / total * two[i].at(0, c, 0, px);
        CHECK(std::abs(r.fused.at(0, c, 0, px) - expected) < 1e-6);
      }
    }
  }
  SUBCASE("branch count and shapes are checked") {
    try {
      ffd_fuse<double>({branches[0], branches[1]}, desc);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kInvalidArgument);
    }
    CHECK_THROWS_AS(ffd_fuse<double>({branches[0], branches[1], random({1, 4, 2, 3}, rng)}, desc), Error);
  }
}

TEST_CASE("ffd weights are convex at every pixel") {
  ParamSet<double> params;
  Rng rng(4);
  DprBlock<double> block(params, "dpr", DprConfig{4, 4, 5}, rng);
  for (auto& d : block.descriptors)
    for (double& v : d.weight.mutable_data()) v *= 4.0;
  std::vector<TensorD> branches;
  for (int i = 0; i < 3; ++i) branches.push_back(random({2, 5, 10, 10}, rng, -3, 3));
  auto r = ffd_fuse(branches, block.descriptors);
  for (int n = 0; n < 2; ++n) {
    for (int p = 0; p < 100; ++p) {
      const int y = p / 10, x = p % 10;
      double total = 0;
      for (int i = 0; i < 3; ++i) {
        CHECK(r.weights.at(n, i, y, x) >= 0.0);
        total += r.weights.at(n, i, y, x);
      }
      CHECK(std::abs(total - 1) < 1e-6);
      for (int c = 0; c < 5; ++c) {
        const double a = branches[0].at(n, c, y, x), b = branches[1].at(n, c, y, x), d = branches[2].at(n, c, y, x);
        CHECK(r.fused.at(n, c, y, x) >= std::min({a, b, d}) - 1e-12);
        CHECK(r.fused.at(n, c, y, x) <= std::max({a, b, d}) + 1e-12);
      }
    }
  }
}

TEST_CASE("constant inputs give equal branches in the interior") {
  ParamSet<double> params;
  Rng rng(5);
  DprBlock<double> block(params, "dpr", DprConfig{4, 4, 4}, rng);
  auto t = block.forward_trace(TensorD::full({1, 4, 8, 8}, 0.3), TensorD::full({1, 4, 16, 16}, -0.8));
  for (int i = 6; i < 10; ++i) {
    for (int j = 6; j < 10; ++j) {
      for (int c = 0; c < 4; ++c) {
        const double v = t.branches.near.at(0, c, i, j);
        CHECK(t.branches.mid.at(0, c, i, j) == doctest::Approx(v).epsilon(1e-12));
        CHECK(t.branches.far.at(0, c, i, j) == doctest::Approx(v).epsilon(1e-12));
        CHECK(t.ffd.fused.at(0, c, i, j) == doctest::Approx(v).epsilon(1e-12));
      }
    }
  }
  // With one descriptor shared by all branches the weights are uniform there.
  for (int i = 1; i < 3; ++i) {
    std::copy(block.descriptors[0].weight.data().begin(), block.descriptors[0].weight.data().end(),
              block.descriptors[i].weight.mutable_data().begin());
    block.descriptors[i].bias.mutable_data()[0] = block.descriptors[0].bias.data()[0];
  }
  auto u = block.forward_trace(TensorD::full({1, 4, 8, 8}, 0.3), TensorD::full({1, 4, 16, 16}, -0.8));
  for (int k = 0; k < 3; ++k) CHECK(u.ffd.weights.at(0, k, 7, 8) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("frozen offsets and uniform fusion reduce to three plain convs") {
  Rng rng(6);
  for (int trial = 0; trial < 3; ++trial) {
    ParamSet<double> params;
    DprBlock<double> block(params, "dpr", DprConfig{4 + trial, 3, 4}, rng);
    for (auto& d : block.descriptors) set_descriptor(d, 0.0, 0.0);
    for (double& v : block.norm.gain.mutable_data()) v = rng.uniform(0.5, 1.5);
    for (double& v : block.norm.bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
    auto dec = random({1, 4 + trial, 4, 4}, rng), skip = random({1, 3, 8, 8}, rng);
    auto y = block.forward(dec, skip);

    auto cat = concat_channels<double>({bilinear_resize(dec, 8, 8), skip});
    const auto& w = block.value_weight;
    const auto& b = block.value_bias;
    auto mean = scale(add(add(conv2d(cat, w, b, ConvSpec::same(3, 1, 4)), conv2d(cat, w, b, ConvSpec::same(3, 3, 4))),
                          conv2d(cat, w, b, ConvSpec::same(3, 6, 4))),
                      1.0 / 3);
    auto expected = relu(layer_norm(block.refine(mean), 3, block.norm.gain, block.norm.bias));
    double worst = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) worst = std::max(worst, std::abs(y.data()[i] - expected.data()[i]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("gradient reaches both offset heads") {
  ParamSet<double> params;
  Rng rng(7);
  DprBlock<double> block(params, "dpr", DprConfig{4, 4, 4}, rng);
  auto y = block.forward(random({1, 4, 6, 6}, rng), random({1, 4, 12, 12}, rng));
  std::vector<double> proj(y.numel());
  for (double& v : proj) v = rng.normal();
  weighted_sum(y, proj).backward();
  for (const auto* head : {&block.head_mid, &block.head_far}) {
    const auto g = head->weight.grad();
    CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
  }
}

TEST_CASE("reception path with fixed offsets is sparse and bounded") {
  ParamSet<double> params;
  Rng rng(8);
  DprBlock<double> block(params, "dpr", DprConfig{2, 2, 2}, rng);
  const int n = 24, c = 12;
  auto dec = random({1, 2, n / 2, n / 2}, rng);
  auto skip = random({1, 2, n, n}, rng);
  auto probe = [&](const TensorD& om, const TensorD& of) {
    auto s = copy(skip, true);
    auto cat = concat_channels<double>({bilinear_resize(dec, n, n), s});
    auto t = shared_tri_branch(cat, block.value_weight, block.value_bias, om, of);
    auto fused = ffd_fuse<double>({t.near, t.mid, t.far}, block.descriptors).fused;
    std::vector<double> seed(fused.numel(), 0.0);
    seed[c * n + c] = 1.0;
    weighted_sum(fused, seed).backward();
    std::set<int> radii;
    for (int ch = 0; ch < 2; ++ch)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (s.grad()[(ch * n + i) * n + j] != 0.0) radii.insert(std::max(std::abs(i - c), std::abs(j - c)));
    return radii;
  };
  TensorD zero({1, 18, n, n});
  CHECK(probe(zero, zero) == std::set<int>{0, 1, 3, 6});
  auto radii = probe(random({1, 18, n, n}, rng), random({1, 18, n, n}, rng));
  CHECK(*radii.rbegin() <= 7);
  CHECK(radii.count(0));
  CHECK(radii.count(4));
  CHECK(radii.count(7));
}

TEST_CASE("dpr gradcheck suite") {
  for (const auto& r : run_gradcheck("dpr", 0)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed);
  }
}
