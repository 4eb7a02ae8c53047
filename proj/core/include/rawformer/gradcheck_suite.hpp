#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rawformer/nn/gradcheck.hpp"

namespace rawformer {

/// One registered differentiable op with its relative-error tolerance.
struct GradCheckCase {
  std::string name;
  double tolerance;
  std::function<nn::GradCheckReport(const nn::GradCheckOptions&)> run;
};

/// Tolerances: 1e-3 for cases built on attention, the ViT bottleneck or SSIM, 1e-4 otherwise.
inline constexpr double kLooseTolerance = 1e-3;
inline constexpr double kStrictTolerance = 1e-4;

std::vector<GradCheckCase> gradcheck_registry();

struct GradCheckOutcome {
  std::string name;
  double tolerance = 0.0;
  nn::GradCheckReport report;
  bool passed = false;
};

/// Runs every case whose name contains `filter` (all when empty).
std::vector<GradCheckOutcome> run_gradcheck_suite(const std::string& filter = "", std::uint64_t seed = 1);

}  // namespace rawformer
