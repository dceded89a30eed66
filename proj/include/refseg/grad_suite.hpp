#pragma once

#include <string>
#include <vector>

#include "refseg/grad_check.hpp"

namespace refseg {

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

struct GradSuiteOptions {
  double tolerance = 1e-4;
  double eps = 1e-5;
  double floor = 1e-5;
  std::uint64_t seed = 1;
  bool include_model = true;
  /// Coordinates sampled per parameter tensor in the full-model check.
  std::size_t model_coords = 4;
};

/// Finite-difference checks of every differentiable op, each model component
/// and the full forward pass plus loss on an 8^3 volume.
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace refseg
