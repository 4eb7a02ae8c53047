#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rawformer/nn/tape.hpp"

namespace rawformer::nn {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per tensor; tensors at or below this size are checked fully.
  int coords_per_tensor = 24;
  std::uint64_t seed = 1;
  /// Coordinates where the h and h/2 differences disagree by more than this
  /// (relative) straddle a non-differentiable point and are skipped.
  double kink_tolerance = 1e-4;
  /// Denominator floor of the relative error: gradients smaller than this are
  /// judged on absolute error, since deep double-precision graphs carry forward
  /// roundoff of about 1e-14 that swamps their finite differences.
  double gradient_floor = 1e-8;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t argmax = 0;
  int checked = 0;
  int skipped = 0;
};

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  int checked = 0;
  int skipped = 0;
  std::vector<GradCheckEntry> entries;
};

using GradTarget = std::pair<std::string, Parameter<double>*>;

/// Compares the tape's analytic gradient against central differences
/// (f(x+h) - f(x-h)) / 2h for the scalar L = sum(w * f(...)), w a fixed random
/// weighting of the output. `f` must bind every target through
/// `tape.parameter`. Relative error is (|a - n| - |n - n_half|) / max(|a|, |n|, floor),
/// clamped at 0, where n_half uses step h/2.
GradCheckReport grad_check(const std::string& op, const std::function<Var<double>(Tape<double>&)>& f,
                           const std::vector<GradTarget>& targets, const GradCheckOptions& opt = {});

/// All tensors of a parameter set as targets.
std::vector<GradTarget> targets_of(ParamSet<double>& params, const std::string& prefix = "");

}  // namespace rawformer::nn
