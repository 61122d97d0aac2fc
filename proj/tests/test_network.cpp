#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "pyramidseg/checkpoint.hpp"
#include "pyramidseg/network.hpp"
#include "pyramidseg/training.hpp"

using namespace pyseg;

namespace {

using Multiset = std::map<std::string, int>;

NetworkConfig small_config(Variant v, int classes = 3, uint64_t seed = 0) {
  NetworkConfig c;
  c.num_classes = classes;
  c.input_size = 64;
  c.base_width = 8;
  c.variant = v;
  c.seed = seed;
  return c;
}

template <typename T>
Tensor<T> random_image(int batch, int size, Rng& rng) {
  Tensor<T> t({batch, 3, size, size});
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.uniform());
  return t;
}

Multiset multiset(const std::vector<std::string>& ops) {
  Multiset m;
  for (const auto& op : ops) ++m[op];
  return m;
}

void add_into(Multiset& m, const Multiset& other, int times = 1) {
  for (const auto& [op, n] : other) m[op] += times * n;
}

void remove_from(Multiset& m, const Multiset& other, int times = 1) {
  for (const auto& [op, n] : other) {
    m[op] -= times * n;
    if (m[op] == 0) m.erase(op);
  }
}

template <typename F>
Multiset trace_of(F&& f) {
  OpTrace trace;
  f();
  return multiset(trace.ops());
}

std::size_t vgg16_conv_params(int w) {
  const int widths[] = {w, 2 * w, 4 * w, 8 * w, 8 * w};
  const int convs[] = {2, 2, 3, 3, 3};
  std::size_t total = 0;
  int in = 3;
  for (int s = 0; s < 5; ++s) {
    for (int i = 0; i < convs[s]; ++i) {
      total += static_cast<std::size_t>(in) * widths[s] * 9 + widths[s];
      in = widths[s];
    }
  }
  return total;
}

std::size_t encoder_params(const SegmentationNet<float>& net) {
  std::size_t n = 0;
  for (const auto& m : net.module_counts())
    if (m.name.rfind("encoder.", 0) == 0) n += m.count;
  return n;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pyseg_network_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("network config validation") {
  CHECK(parse_variant("pvf_only") == Variant::kPvfOnly);
  CHECK_THROWS_AS(parse_variant("segformer"), Error);
  for (auto mutate : {+[](NetworkConfig& c) { c.input_size = 40; }, +[](NetworkConfig& c) { c.base_width = 12; },
                      +[](NetworkConfig& c) { c.num_classes = 1; }}) {
    NetworkConfig c = small_config(Variant::kUnetPlus);
    mutate(c);
    try {
      c.validate();
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kConfig);
    }
  }
}

TEST_CASE("encoder skips follow the stage plan") {
  SegmentationNet<float> net(small_config(Variant::kDeepPyramidPlus));
  Rng rng(1);
  NoGradGuard guard;
  auto skips = net.encode(random_image<float>(1, 64, rng), false);
  REQUIRE(skips.size() == 5);
  const Shape expected[] = {{1, 8, 64, 64}, {1, 16, 32, 32}, {1, 32, 16, 16}, {1, 64, 8, 8}, {1, 64, 4, 4}};
  for (int i = 0; i < 5; ++i) CHECK(skips[i].shape() == expected[i]);
}

TEST_CASE("full-width encoder matches the VGG16 conv count") {
  NetworkConfig c;
  c.input_size = 64;
  c.variant = Variant::kUnetPlus;
  SegmentationNet<float> net(c);
  const double vgg = static_cast<double>(vgg16_conv_params(64));
  CHECK(vgg == 14714688.0);
  CHECK(std::abs(static_cast<double>(encoder_params(net)) - vgg) / vgg < 0.01);
}

TEST_CASE("desk-scale parameter count matches the closed form") {
  const int w = 8, k = 3;
  auto conv = [](std::size_t in, std::size_t out, std::size_t kernel, std::size_t groups = 1) {
    return out * (in / groups) * kernel * kernel + out;
  };
  auto pvf = [&](std::size_t c) { return conv(c, c / 4, 1) + conv(c, c / 2, 3, 4) + conv(c / 2, c, 3) + 2 * c; };
  auto dpr = [&](std::size_t dec, std::size_t skip, std::size_t out) {
    const std::size_t cin = dec + skip;
    return conv(cin, 18, 9) + conv(cin, 18, 15) + conv(cin, out, 3) + 3 * conv(out, 1, 1) + conv(out, out, 3) + 2 * out;
  };
  auto dbl = [&](std::size_t in, std::size_t out) { return conv(in, out, 3) + conv(out, out, 3) + 4 * out; };

  std::size_t encoder = vgg16_conv_params(w);
  for (int width : {w, w, 2 * w, 2 * w, 4 * w, 4 * w, 4 * w, 8 * w, 8 * w, 8 * w, 8 * w, 8 * w, 8 * w}) encoder += 2 * width;
  const std::size_t dec[] = {8 * w, 4 * w, 2 * w, w}, skip[] = {8 * w, 4 * w, 2 * w, w}, out[] = {4 * w, 2 * w, w, w};
  std::size_t dp = encoder + pvf(8 * w) + conv(w, k, 1), unet = encoder + conv(w, k, 1), pvf_only = dp;
  for (int l = 0; l < 4; ++l) {
    dp += dpr(dec[l], skip[l], out[l]) + pvf(out[l]);
    unet += dbl(dec[l] + skip[l], out[l]);
    pvf_only += dbl(dec[l] + skip[l], out[l]) + pvf(out[l]);
  }
  CHECK(SegmentationNet<float>(small_config(Variant::kDeepPyramidPlus)).parameter_count() == dp);
  CHECK(SegmentationNet<float>(small_config(Variant::kUnetPlus)).parameter_count() == unet);
  CHECK(SegmentationNet<float>(small_config(Variant::kPvfOnly)).parameter_count() == pvf_only);
  CHECK(dp == 1649199);
}

TEST_CASE("doubling the class count changes only the head") {
  for (Variant v : {Variant::kDeepPyramidPlus, Variant::kUnetPlus}) {
    SegmentationNet<float> a(small_config(v, 3)), b(small_config(v, 6));
    const auto ma = a.module_counts(), mb = b.module_counts();
    REQUIRE(ma.size() == mb.size());
    for (std::size_t i = 0; i < ma.size(); ++i) {
      CHECK(ma[i].name == mb[i].name);
      if (ma[i].name == "head") {
        CHECK(mb[i].count - ma[i].count == 3 * 8 + 3);
      } else {
        CHECK(ma[i].count == mb[i].count);
      }
    }
  }
}

TEST_CASE("module counts sum to the total") {
  for (Variant v : {Variant::kDeepPyramidPlus, Variant::kUnetPlus, Variant::kPvfOnly}) {
    SegmentationNet<float> net(small_config(v));
    std::size_t total = 0;
    for (const auto& m : net.module_counts()) total += m.count;
    CHECK(total == net.parameter_count());
  }
}

TEST_CASE("logit shapes for every variant") {
  Rng rng(2);
  auto x = random_image<float>(2, 64, rng);
  for (Variant v : {Variant::kDeepPyramidPlus, Variant::kUnetPlus, Variant::kPvfOnly}) {
    SegmentationNet<float> net(small_config(v, 3));
    NoGradGuard guard;
    CHECK(net.forward(x, false).shape() == Shape{2, 3, 64, 64});
    CHECK(net.forward(x, true).shape() == Shape{2, 3, 64, 64});
  }
  SegmentationNet<float> net(small_config(Variant::kUnetPlus, 5));
  CHECK_THROWS_AS(net.forward(random_image<float>(1, 32, rng), false), Error);
}

TEST_CASE("seeded initialisation is deterministic") {
  const auto a = encode_checkpoint(checkpoint_entries(SegmentationNet<float>(small_config(Variant::kDeepPyramidPlus, 3, 7))));
  const auto b = encode_checkpoint(checkpoint_entries(SegmentationNet<float>(small_config(Variant::kDeepPyramidPlus, 3, 7))));
  const auto c = encode_checkpoint(checkpoint_entries(SegmentationNet<float>(small_config(Variant::kDeepPyramidPlus, 3, 8))));
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("op multisets differ exactly by the decoder blocks") {
  Rng rng(3);
  auto x = random_image<float>(1, 64, rng);
  auto traced = [&](Variant v) {
    SegmentationNet<float> net(small_config(v));
    return trace_of([&] { net.forward(x, true); });
  };
  const Multiset dp = traced(Variant::kDeepPyramidPlus), unet = traced(Variant::kUnetPlus),
                 pvf_only = traced(Variant::kPvfOnly);

  ParamSet<float> scratch;
  Rng init(4);
  const int widths[] = {64, 32, 16, 8, 8};  // bottleneck, then decoder outputs
  const int extents[] = {4, 8, 16, 32, 64};
  Multiset pvf_ops, dpr_ops, unet_ops;
  for (int i = 0; i < 5; ++i) {
    PvfBlock<float> block(scratch, "p" + std::to_string(i), PvfConfig{widths[i]}, init);
    Tensor<float> in({1, widths[i], extents[i], extents[i]});
    add_into(pvf_ops, trace_of([&] { block.forward(in); }));
  }
  const int dec[] = {64, 32, 16, 8}, skip[] = {64, 32, 16, 8};
  for (int l = 0; l < 4; ++l) {
    DprBlock<float> block(scratch, "d" + std::to_string(l), DprConfig{dec[l], skip[l], widths[l + 1]}, init);
    DoubleConv<float> dc(scratch, "u" + std::to_string(l), dec[l] + skip[l], widths[l + 1], init);
    Tensor<float> d({1, dec[l], extents[l], extents[l]}), s({1, skip[l], extents[l + 1], extents[l + 1]});
    add_into(dpr_ops, trace_of([&] { block.forward(d, s); }));
    add_into(unet_ops, trace_of([&] {
      auto up = bilinear_resize(d, extents[l + 1], extents[l + 1]);
      dc(concat_channels<float>({up, s}), true);
    }));
  }

  Multiset core_dp = dp, core_unet = unet, core_pvf = pvf_only;
  remove_from(core_dp, pvf_ops);
  remove_from(core_dp, dpr_ops);
  remove_from(core_unet, unet_ops);
  remove_from(core_pvf, pvf_ops);
  remove_from(core_pvf, unet_ops);
  CHECK(core_dp == core_unet);
  CHECK(core_pvf == core_unet);
  CHECK(core_unet.count("deform_conv2d") == 0);
  CHECK(dp.at("deform_conv2d") == 8);
  CHECK(pvf_only.count("deform_conv2d") == 0);
}

TEST_CASE("one small SGD step lowers the loss") {
  NetworkConfig c = small_config(Variant::kDeepPyramidPlus);
  c.seed = 5;
  SegmentationNet<double> net(c);
  Rng rng(6);
  auto x = random_image<double>(1, 64, rng);
  std::vector<int32_t> target(64 * 64);
  for (int i = 0; i < 64 * 64; ++i) target[i] = (i / 64 > 40) ? 2 : ((i % 64) > 30 ? 1 : 0);
  // Batch-norm statistics follow the same batch in both passes, so the
  // objective is a fixed function of the weights.
  auto loss_now = [&] { return ce_log_dice_loss(net.forward(x, true), target, 0.5); };
  auto before = loss_now();
  before.backward();
  const double lr = 1e-4;
  for (auto& e : net.params().entries()) {
    auto v = e.value;
    if (!v.has_grad()) continue;
    auto g = v.grad();
    auto d = v.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }
  NoGradGuard guard;
  const double after = loss_now().item();
  CHECK(after < before.item());
}

TEST_CASE("every parameter receives a gradient") {
  for (Variant v : {Variant::kDeepPyramidPlus, Variant::kUnetPlus, Variant::kPvfOnly}) {
    SegmentationNet<float> net(small_config(v, 3, 9));
    Rng rng(10);
    auto x = random_image<float>(2, 64, rng);
    std::vector<int32_t> target(2 * 64 * 64);
    for (auto& t : target) t = static_cast<int32_t>(rng.below(3));
    ce_log_dice_loss(net.forward(x, true), target, 0.5).backward();
    for (const auto& e : net.params().entries()) {
      const auto g = e.value.grad();
      INFO(variant_name(v) << " " << e.name);
      CHECK(std::any_of(g.begin(), g.end(), [](float f) { return f != 0.0f; }));
    }
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  SegmentationNet<float> net(small_config(Variant::kDeepPyramidPlus, 4, 11));
  // Move the batch-norm statistics away from their defaults first.
  Rng rng(12);
  {
    NoGradGuard guard;
    net.forward(random_image<float>(2, 64, rng), true);
  }
  const auto path = temp_path("a.dpyr");
  save_checkpoint(path.string(), net);
  auto loaded = load_checkpoint(path.string());
  CHECK(loaded->config().num_classes == 4);
  CHECK(loaded->config().variant == Variant::kDeepPyramidPlus);
  const auto path2 = temp_path("b.dpyr");
  save_checkpoint(path2.string(), *loaded);
  CHECK(read_file_bytes(path.string()) == read_file_bytes(path2.string()));

  const auto& pa = net.params().entries();
  const auto& pb = loaded->params().entries();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::memcmp(pa[i].value.data().data(), pb[i].value.data().data(), pa[i].value.numel() * sizeof(float)) == 0);
  }
  const auto& ba = net.params().buffers();
  const auto& bb = loaded->params().buffers();
  REQUIRE(ba.size() == bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba[i].state->running_mean == bb[i].state->running_mean);
    CHECK(ba[i].state->running_var == bb[i].state->running_var);
  }
  NoGradGuard guard;
  auto x = random_image<float>(1, 64, rng);
  auto ya = net.forward(x, false), yb = loaded->forward(x, false);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST_CASE("checkpoint byte layout") {
  CheckpointEntry e{"w", {2, 3}, {1, 2, 3, 4, 5, 6}};
  const auto bytes = encode_checkpoint({e});
  std::vector<uint8_t> expected{'D', 'P', 'Y', 'R', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 'w', 2, 2, 0, 0, 0, 3, 0, 0, 0};
  for (float f = 1; f <= 6; ++f) {
    uint8_t raw[4];
    std::memcpy(raw, &f, 4);
    expected.insert(expected.end(), raw, raw + 4);
  }
  CHECK(bytes == expected);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 1);
  CHECK(back[0].name == "w");
  CHECK(back[0].shape == Shape{2, 3});
  CHECK(back[0].values == std::vector<float>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("checkpoint errors are distinct") {
  const auto good = encode_checkpoint({CheckpointEntry{"a", {2}, {1, 2}}, CheckpointEntry{"b", {1}, {3}}});
  auto expect = [](std::vector<uint8_t> bytes, ErrorCode code) {
    try {
      decode_checkpoint(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  auto magic = good;
  magic[0] = 'X';
  expect(magic, ErrorCode::kBadMagic);
  auto version = good;
  version[4] = 2;
  expect(version, ErrorCode::kBadVersion);
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() - 1}) expect(std::vector<uint8_t>(good.begin(), good.begin() + cut), ErrorCode::kTruncated);
  auto twice = good;
  *std::find(twice.begin() + 17, twice.end(), 'b') = 'a';
  expect(twice, ErrorCode::kDuplicateName);
  CHECK_THROWS_AS(encode_checkpoint({CheckpointEntry{"a", {1}, {1}}, CheckpointEntry{"a", {1}, {2}}}), Error);

  try {
    load_checkpoint(temp_path("missing.dpyr").string());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotFound);
  }
  try {
    network_from_entries(decode_checkpoint(good));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMalformed);
  }
}
