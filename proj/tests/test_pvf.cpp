#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "pyramidseg/gradcheck.hpp"
#include "pyramidseg/pvf.hpp"

using namespace pyseg;

namespace {

TensorD random(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

double neighbourhood_mean(const TensorD& x, int c, int y, int xx, int k) {
  double acc = 0;
  int count = 0;
  for (int i = std::max(0, y - k / 2); i <= std::min(x.dim(2) - 1, y + k / 2); ++i)
    for (int j = std::max(0, xx - k / 2); j <= std::min(x.dim(3) - 1, xx + k / 2); ++j) {
      acc += x.at(0, c, i, j);
      ++count;
    }
  return acc / count;
}

double channel_variance(const TensorD& x, int n, int c) {
  const int plane = x.dim(2) * x.dim(3);
  const double* p = x.data().data() + (static_cast<std::size_t>(n) * x.dim(1) + c) * plane;
  double m = 0, v = 0;
  for (int i = 0; i < plane; ++i) m += p[i];
  m /= plane;
  for (int i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
  return v / plane;
}

}  // namespace

TEST_CASE("pvf config validation") {
  for (int c : {0, 4, 6, 12, 20}) {
    try {
      PvfConfig{c}.validate();
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kConfig);
    }
  }
  PvfConfig even{16, {3, 4, 9}};
  CHECK_THROWS_AS(even.validate(), Error);
  PvfConfig unordered{16, {5, 3, 9}};
  CHECK_THROWS_AS(unordered.validate(), Error);
  CHECK_NOTHROW(PvfConfig{8}.validate());
  CHECK(PvfConfig{16}.bottleneck_channels() == 4);
  CHECK(PvfConfig{16}.hidden_channels() == 8);
}

TEST_CASE("pyramid_branch") {
  Rng rng(1);
  auto x = random({1, 2, 5, 6}, rng);
  auto same = pyramid_branch(x, 1);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  auto flat = pyramid_branch(TensorD::full({1, 1, 6, 6}, 2.5), 5);
  for (double v : flat.data()) CHECK(v == doctest::Approx(2.5));
  TensorD grid({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(pyramid_branch(grid, 3).at(0, 0, 1, 1) == 5.0);
}

TEST_CASE("pvf preserves shape") {
  ParamSet<double> params;
  Rng rng(2);
  PvfBlock<double> block(params, "pvf", PvfConfig{16}, rng);
  auto y = block.forward(random({2, 16, 32, 32}, rng));
  CHECK(y.shape() == Shape{2, 16, 32, 32});
  for (int s : {5, 8, 13}) CHECK(block.forward(random({1, 16, s, s + 1}, rng)).shape() == Shape{1, 16, s, s + 1});
  CHECK_THROWS_AS(block.forward(random({1, 12, 8, 8}, rng)), Error);
}

TEST_CASE("constant input maps to the affine bias") {
  ParamSet<double> params;
  Rng rng(3);
  PvfBlock<double> block(params, "pvf", PvfConfig{8}, rng);
  for (int c = 0; c < 8; ++c) block.norm.bias.mutable_data()[c] = 0.1 * c - 0.3;
  auto t = block.forward_trace(TensorD::full({1, 8, 9, 9}, 0.7));
  for (int c = 0; c < 2; ++c) {
    const double v = t.reduced.at(0, c, 4, 4);
    for (const auto& branch : t.branches)
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) CHECK(branch.at(0, c, i, j) == doctest::Approx(v).epsilon(1e-12));
  }
  // A 3x3 conv on a constant map is constant only away from the zero padding,
  // so the mixed map is not spatially constant; the branches feeding it are.
  auto again = block.forward(TensorD::full({1, 8, 9, 9}, -4.0));
  CHECK(again.shape() == Shape{1, 8, 9, 9});
}

TEST_CASE("branch outputs match the neighbourhood oracle") {
  ParamSet<double> params;
  Rng rng(4);
  PvfBlock<double> block(params, "pvf", PvfConfig{8}, rng);
  auto t = block.forward_trace(random({1, 8, 8, 8}, rng));
  const auto& r = t.reduced;
  for (int c = 0; c < 2; ++c) {
    double global = 0;
    for (int i = 0; i < 64; ++i) global += r.at(0, c, i / 8, i % 8);
    global /= 64;
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        CHECK(t.branches[0].at(0, c, i, j) == doctest::Approx(global).epsilon(1e-12));
        for (int b = 0; b < 3; ++b) {
          const int k = block.config().pool_kernels[b];
          CHECK(t.branches[b + 1].at(0, c, i, j) == doctest::Approx(neighbourhood_mean(r, c, i, j, k)).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("grouped conv channel depends only on its group") {
  ParamSet<double> params;
  Rng rng(5);
  PvfBlock<double> block(params, "pvf", PvfConfig{8}, rng);
  auto t = block.forward_trace(random({1, 8, 8, 8}, rng));
  // 8 concatenated channels in 4 groups of 2 feed 4 grouped outputs, one each.
  for (int g = 0; g < 4; ++g) {
    TensorD masked(t.concatenated.shape(),
                   std::vector<double>(t.concatenated.data().begin(), t.concatenated.data().end()));
    auto d = masked.mutable_data();
    for (int c = 0; c < 8; ++c)
      if (c / 2 != g) std::fill(d.begin() + c * 64, d.begin() + (c + 1) * 64, 0.0);
    auto out = block.grouped(masked);
    for (int o = 0; o < 4; ++o) {
      bool same = true;
      for (int i = 0; i < 64; ++i) same &= out.data()[o * 64 + i] == t.grouped.data()[o * 64 + i];
      CHECK(same == (o == g));
    }
  }
}

TEST_CASE("pvf properties on random inputs") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSet<double> params;
    PvfBlock<double> block(params, "pvf", PvfConfig{8 + 8 * (trial % 3)}, rng);
    const int h = 6 + trial, w = 9 - trial % 3;
    auto x = random({2, block.config().channels, h, w}, rng, -3, 3);
    auto t = block.forward_trace(x);
    CHECK(t.output.shape() == x.shape());
    for (int n = 0; n < 2; ++n) {
      for (int c = 0; c < block.config().bottleneck_channels(); ++c) {
        CHECK(channel_variance(t.branches[0], n, c) < 1e-20);
        for (int b = 1; b < 4; ++b) CHECK(channel_variance(t.branches[b], n, c) <= channel_variance(t.reduced, n, c) + 1e-12);
      }
    }
  }
}

TEST_CASE("pvf gradcheck suite") {
  for (const auto& r : run_gradcheck("pvf", 0)) {
    INFO(r.name << " max error " << r.max_error);
    CHECK(r.passed);
  }
}
