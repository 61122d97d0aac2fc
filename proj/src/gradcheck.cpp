#include "pyramidseg/gradcheck.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>

#include "pyramidseg/deform.hpp"
#include "pyramidseg/dpr.hpp"
#include "pyramidseg/ops.hpp"
#include "pyramidseg/pvf.hpp"
#include "pyramidseg/rng.hpp"
#include "pyramidseg/training.hpp"

namespace pyseg {

namespace {

std::atomic<bool> g_sabotage{false};

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

TensorD random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Values with |v| in [lo, hi] and random sign; keeps inputs clear of kinks.
TensorD signed_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  TensorD t(shape);
  for (double& v : t.mutable_data()) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(lo, hi);
  return t;
}

}  // namespace

void set_gradcheck_sabotage(bool enabled) { g_sabotage = enabled; }
bool gradcheck_sabotage() { return g_sabotage; }

double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

GradCheckResult finite_diff_check(const std::string& name, const std::function<TensorD()>& f,
                                  const std::vector<TensorD>& wrt, const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = name;
  Rng rng = Rng(options.seed).split(fnv1a(name));

  std::vector<TensorD> leaves = wrt;
  for (auto& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  TensorD out = f();
  std::vector<double> proj(out.numel());
  for (double& p : proj) p = rng.normal();
  weighted_sum(out, proj).backward();

  auto objective = [&]() {
    NoGradGuard guard;
    const TensorD y = f();
    double acc = 0;
    for (std::size_t i = 0; i < proj.size(); ++i) acc += y.data()[i] * proj[i];
    return acc;
  };

  for (auto& t : leaves) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords;
    if (static_cast<int>(t.numel()) <= options.max_coords) {
      for (std::size_t i = 0; i < t.numel(); ++i) coords.push_back(i);
    } else {
      std::set<std::size_t> picked;
      while (static_cast<int>(picked.size()) < options.max_coords) picked.insert(rng.below(t.numel()));
      coords.assign(picked.begin(), picked.end());
    }
    auto data = t.mutable_data();
    for (std::size_t i : coords) {
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = objective();
      data[i] = saved - options.step;
      const double down = objective();
      data[i] = saved;
      const double numeric = (up - down) / (2 * options.step);
      double a = analytic[i];
      if (g_sabotage) a = a * 1.01 + 1e-2;
      result.max_error = std::max(result.max_error, gradient_error(a, numeric));
      ++result.coords;
    }
    t.zero_grad();
  }
  result.passed = result.max_error < options.tolerance;
  return result;
}

const std::vector<std::string>& gradcheck_suites() {
  static const std::vector<std::string> kSuites{"tensor", "deform", "pvf", "dpr", "loss"};
  return kSuites;
}

namespace {

using Results = std::vector<GradCheckResult>;

struct Suite {
  Results& out;
  std::string name;
  GradCheckOptions options;

  void check(const std::string& label, const std::function<TensorD()>& f, const std::vector<TensorD>& wrt) {
    auto r = finite_diff_check(name + "." + label, f, wrt, options);
    r.suite = name;
    out.push_back(std::move(r));
  }
};

void tensor_suite(Suite& s, Rng& rng) {
  struct ConvCase {
    Shape x;
    int m, k, d, g;
  };
  const ConvCase conv_cases[] = {
      {{2, 3, 5, 6}, 4, 3, 1, 1}, {{1, 8, 5, 5}, 8, 3, 1, 4}, {{1, 2, 7, 7}, 3, 3, 2, 1},
      {{1, 4, 4, 5}, 2, 1, 1, 1}, {{1, 4, 6, 6}, 4, 5, 1, 2}, {{2, 2, 9, 8}, 2, 3, 3, 1},
  };
  for (const auto& c : conv_cases) {
    const ConvSpec spec = ConvSpec::same(c.k, c.d, c.m, c.g);
    auto x = random_tensor(c.x, rng);
    auto w = random_tensor({c.m, c.x[1] / c.g, c.k, c.k}, rng);
    auto b = random_tensor({c.m}, rng);
    s.check("conv2d " + shape_str(c.x) + " k" + std::to_string(c.k) + " d" + std::to_string(c.d) + " g" +
                std::to_string(c.g),
            [=] { return conv2d(x, w, b, spec); }, {x, w, b});
  }
  for (const Shape& shape : {Shape{1, 2, 5, 5}, Shape{2, 1, 6, 4}, Shape{1, 3, 9, 9}}) {
    auto x = random_tensor(shape, rng);
    for (int k : {3, 5}) {
      s.check("avg_pool k" + std::to_string(k) + " " + shape_str(shape), [=] { return avg_pool(x, k, 1); }, {x});
    }
    s.check("avg_pool k2 s2 " + shape_str(shape), [=] { return avg_pool(x, 2, 2); }, {x});
    s.check("global_avg_pool " + shape_str(shape), [=] { return global_avg_pool(x); }, {x});
    s.check("bilinear_resize up " + shape_str(shape), [=] { return bilinear_resize(x, 2 * x.dim(2), x.dim(3) + 3); },
            {x});
    s.check("bilinear_resize down " + shape_str(shape), [=] { return bilinear_resize(x, 3, 2); }, {x});
    s.check("softmax dim1 " + shape_str(shape), [=] { return softmax(x, 1); }, {x});
    s.check("softmax dim3 " + shape_str(shape), [=] { return softmax(x, 3); }, {x});
    auto kinked = signed_tensor(shape, rng, 0.05, 2.0);
    s.check("relu " + shape_str(shape), [=] { return relu(kinked); }, {kinked});
    auto clamp_in = random_tensor(shape, rng, -0.9, 0.9);
    for (double& v : clamp_in.mutable_data()) {
      if (rng.uniform() < 0.3) v = v < 0 ? v - 1.2 : v + 1.2;
    }
    s.check("hardtanh " + shape_str(shape), [=] { return hardtanh(clamp_in); }, {clamp_in});
    auto g = random_tensor({shape[1]}, rng, 0.5, 1.5);
    auto bias = random_tensor({shape[1]}, rng);
    s.check("layer_norm n3 " + shape_str(shape), [=] { return layer_norm(x, 3, g, bias); }, {x, g, bias});
    auto g2 = random_tensor({shape[2]}, rng, 0.5, 1.5);
    auto b2 = random_tensor({shape[2]}, rng);
    s.check("layer_norm n2 " + shape_str(shape), [=] { return layer_norm(x, 2, g2, b2); }, {x, g2, b2});
    auto gamma = random_tensor({shape[1]}, rng, 0.5, 1.5);
    auto beta = random_tensor({shape[1]}, rng);
    if (shape[0] * shape[2] * shape[3] > 1) {
      s.check("batch_norm train " + shape_str(shape),
              [=] {
                BatchNormState st(shape[1]);
                return batch_norm(x, gamma, beta, st, true);
              },
              {x, gamma, beta});
    }
    s.check("batch_norm eval " + shape_str(shape),
            [=] {
              BatchNormState st(shape[1]);
              for (int c = 0; c < shape[1]; ++c) {
                st.running_mean[c] = 0.1f * c;
                st.running_var[c] = 1.0f + 0.5f * c;
              }
              return batch_norm(x, gamma, beta, st, false);
            },
            {x, gamma, beta});
    auto y = random_tensor(shape, rng);
    s.check("add/sub/mul/scale " + shape_str(shape), [=] { return scale(mul(add(x, y), sub(x, y)), 0.7); }, {x, y});
    Shape one = shape;
    one[1] = 1;
    auto wmap = random_tensor(one, rng);
    s.check("mul_broadcast_channels " + shape_str(shape), [=] { return mul_broadcast_channels(x, wmap); }, {x, wmap});
    s.check("sum/mean " + shape_str(shape), [=] { return add(sum(x), scale(mean(y), 3.0)); }, {x, y});
    s.check("concat/slice " + shape_str(shape),
            [=] { return slice_channels(concat_channels<double>({x, y, x}), 1, shape[1] + 1); }, {x, y});
  }
  for (const Shape& shape : {Shape{1, 1, 4, 4}, Shape{2, 3, 6, 4}, Shape{1, 2, 8, 10}}) {
    // Distinct values keep every 2x2 window away from ties.
    TensorD x(shape);
    std::vector<double> perm(x.numel());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = 0.1 * static_cast<double>(i);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::copy(perm.begin(), perm.end(), x.mutable_data().begin());
    s.check("max_pool2 " + shape_str(shape), [=] { return max_pool2(x); }, {x});
  }
}

// Offsets whose fractional parts stay in [0.2, 0.8] so no sample point sits on
// an interpolation cell edge.
TensorD fractional_offsets(const Shape& shape, Rng& rng) { return signed_tensor(shape, rng, 0.2, 0.8); }

void deform_suite(Suite& s, Rng& rng) {
  const Shape shapes[] = {{1, 2, 7, 7}, {2, 3, 9, 8}, {1, 2, 14, 13}};
  for (const Shape& shape : shapes) {
    for (int d : {1, 3, 6}) {
      auto x = random_tensor(shape, rng);
      auto w = random_tensor({3, shape[1], 3, 3}, rng);
      auto b = random_tensor({3}, rng);
      auto off = fractional_offsets({shape[0], 18, shape[2], shape[3]}, rng);
      s.check("deform_conv2d d" + std::to_string(d) + " " + shape_str(shape),
              [=] { return deform_conv2d(x, w, b, d, off); }, {x, w, b, off});
    }
  }
  for (const Shape& shape : {Shape{1, 2, 6, 6}, Shape{1, 3, 8, 7}, Shape{2, 2, 5, 9}}) {
    for (int d : {3, 6}) {
      const int k = offset_head_kernel(d);
      auto x = random_tensor(shape, rng);
      // Small weights keep most outputs inside the linear range of the clamp
      // and the bias pushes a few channels into saturation.
      auto w = random_tensor({18, shape[1], k, k}, rng, -0.02, 0.02);
      auto b = random_tensor({18}, rng, -0.6, 0.6);
      for (int c = 0; c < 18; c += 6) b.mutable_data()[c] = 1.8;
      s.check("offset_head d" + std::to_string(d) + " " + shape_str(shape),
              [=] { return offset_head(x, w, b, d); }, {x, w, b});
    }
    auto x = random_tensor(shape, rng);
    auto w = random_tensor({2, shape[1], 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    auto om = fractional_offsets({shape[0], 18, shape[2], shape[3]}, rng);
    auto of = fractional_offsets({shape[0], 18, shape[2], shape[3]}, rng);
    s.check("shared_tri_branch " + shape_str(shape),
            [=] {
              auto t = shared_tri_branch(x, w, b, om, of);
              return concat_channels<double>({t.near, t.mid, t.far});
            },
            {x, w, b, om, of});
  }
}

std::vector<TensorD> param_values(const ParamSet<double>& params) {
  std::vector<TensorD> out;
  for (const auto& e : params.entries()) out.push_back(e.value);
  return out;
}

void pvf_suite(Suite& s, Rng& rng) {
  for (const Shape& shape : {Shape{1, 8, 8, 8}, Shape{2, 8, 5, 6}, Shape{1, 16, 6, 6}}) {
    ParamSet<double> params;
    Rng init = rng.split(static_cast<uint64_t>(shape[1] * 100 + shape[2]));
    PvfBlock<double> block(params, "pvf", PvfConfig{shape[1]}, init);
    // Non-trivial affine so gain/bias gradients are exercised.
    for (double& v : block.norm.gain.mutable_data()) v = rng.uniform(0.5, 1.5);
    for (double& v : block.norm.bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
    auto x = random_tensor(shape, rng);
    auto wrt = param_values(params);
    wrt.insert(wrt.begin(), x);
    s.check("pvf_forward " + shape_str(shape), [=, &block] { return block.forward(x); }, wrt);
    s.check("pyramid_branch k5 " + shape_str(shape), [=] { return pyramid_branch(x, 5); }, {x});
  }
}

void dpr_suite(Suite& s, Rng& rng) {
  struct Case {
    int batch, dec, skip, out, h;
  };
  for (const Case& c : {Case{1, 4, 4, 4, 8}, Case{1, 6, 2, 3, 6}, Case{2, 4, 4, 2, 5}}) {
    ParamSet<double> params;
    Rng init = rng.split(static_cast<uint64_t>(c.dec * 1000 + c.h));
    DprBlock<double> block(params, "dpr", DprConfig{c.dec, c.skip, c.out}, init);
    // Heads start at zero in training; here they get small weights and a
    // 0.5 bias so offsets sit mid-cell and their gradients are exercised.
    for (auto* head : {&block.head_mid, &block.head_far}) {
      for (double& v : head->weight.mutable_data()) v = rng.uniform(-0.01, 0.01);
      for (double& v : head->bias.mutable_data()) v = rng.uniform() < 0.5 ? 0.5 : -0.5;
    }
    for (double& v : block.norm.gain.mutable_data()) v = rng.uniform(0.5, 1.5);
    for (double& v : block.norm.bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
    auto dec = random_tensor({c.batch, c.dec, c.h, c.h}, rng);
    auto skip = random_tensor({c.batch, c.skip, 2 * c.h, 2 * c.h}, rng);
    auto wrt = param_values(params);
    wrt.insert(wrt.begin(), {dec, skip});
    s.check("dpr_forward dec" + shape_str(dec.shape()) + " skip" + shape_str(skip.shape()),
            [=, &block] { return block.forward(dec, skip); }, wrt);

    std::vector<TensorD> branches;
    for (int i = 0; i < 3; ++i) branches.push_back(random_tensor({c.batch, c.out, c.h, c.h}, rng));
    std::vector<TensorD> ffd_wrt = branches;
    for (const auto& d : block.descriptors) {
      ffd_wrt.push_back(d.weight);
      ffd_wrt.push_back(d.bias);
    }
    s.check("ffd_fuse " + shape_str(branches[0].shape()),
            [=, &block] { return ffd_fuse(branches, block.descriptors).fused; }, ffd_wrt);
  }
}

void loss_suite(Suite& s, Rng& rng) {
  const Shape shapes[] = {{2, 3, 4, 4}, {1, 2, 5, 3}, {1, 4, 3, 3}};
  for (const Shape& shape : shapes) {
    for (double alpha : {0.0, 0.5, 1.0}) {
      auto logits = random_tensor(shape, rng, -2, 2);
      std::vector<int32_t> target(static_cast<std::size_t>(shape[0]) * shape[2] * shape[3]);
      for (auto& t : target) t = static_cast<int32_t>(rng.below(shape[1]));
      char label[64];
      std::snprintf(label, sizeof label, "ce_log_dice alpha=%.1f ", alpha);
      s.check(label + shape_str(shape), [=] { return ce_log_dice_loss(logits, target, alpha); }, {logits});
    }
  }
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const std::string& module, uint64_t seed) {
  const auto& suites = gradcheck_suites();
  if (module != "all" && std::find(suites.begin(), suites.end(), module) == suites.end()) {
    raise(ErrorCode::kInvalidArgument, "unknown gradcheck module '" + module + "' (expected all, tensor, deform, pvf, dpr or loss)");
  }
  Results out;
  GradCheckOptions options;
  options.seed = seed;
  for (const auto& name : suites) {
    if (module != "all" && module != name) continue;
    Suite s{out, name, options};
    Rng rng = Rng(seed).split(fnv1a(name));
    if (name == "tensor") tensor_suite(s, rng);
    if (name == "deform") deform_suite(s, rng);
    if (name == "pvf") pvf_suite(s, rng);
    if (name == "dpr") dpr_suite(s, rng);
    if (name == "loss") loss_suite(s, rng);
  }
  return out;
}

}  // namespace pyseg
