#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "refseg/tensor.hpp"

namespace refseg {

struct GradCheckOptions {
  double eps = 1e-5;        // central-difference step
  double tolerance = 1e-5;  // pass threshold on the max relative error
  // Relative errors are |a - n| / max(|a|, |n|, floor * max(1, |f|)). The
  // floor keeps coordinates whose true gradient is ~0 from dividing noise by
  // noise; it scales with |f| because the finite-difference rounding error
  // does.
  double floor = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct ParamGradCheck {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool passed = false;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. `f` must rebuild its graph from the current values of
/// `params` on every call. Throws EvaluationError when f is non-finite.
GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedTensors& params, const GradCheckOptions& options = {});

}  // namespace refseg
