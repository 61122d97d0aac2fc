#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pyramidseg/tensor.hpp"

namespace pyseg {

struct GradCheckOptions {
  double step = 1e-4;       // central-difference step h
  double tolerance = 1e-4;  // on the relative error below
  // Coordinates probed per input tensor; smaller tensors are checked in full.
  int max_coords = 24;
  uint64_t seed = 0;
};

// Relative error of one coordinate: |a - n| / max(|a|, |n|, 1e-3), where a is
// the analytic and n the numerical derivative.
double gradient_error(double analytic, double numeric);

struct GradCheckResult {
  std::string suite;
  std::string name;
  double max_error = 0;
  std::size_t coords = 0;
  bool passed = false;
};

// f recomputes its output from the tensors in wrt (which it captures). The
// output is projected onto fixed random weights to form a scalar; every
// probed coordinate of every wrt tensor is perturbed in place by +-h.
GradCheckResult finite_diff_check(const std::string& name, const std::function<TensorD()>& f,
                                  const std::vector<TensorD>& wrt, const GradCheckOptions& options = {});

// Suites: tensor, deform, pvf, dpr, loss.
const std::vector<std::string>& gradcheck_suites();
// module is a suite name or "all"; unknown names are kInvalidArgument.
std::vector<GradCheckResult> run_gradcheck(const std::string& module, uint64_t seed = 0);

// Test hook: while set, analytic gradients are corrupted before comparison so
// callers can confirm that the harness reports failures.
void set_gradcheck_sabotage(bool enabled);
bool gradcheck_sabotage();

}  // namespace pyseg
