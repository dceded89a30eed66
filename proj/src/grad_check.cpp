#include "refseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw EvaluationError("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedTensors& params, const GradCheckOptions& options) {
  // Analytic pass.
  std::vector<bool> prev_flags;
  for (const auto& [name, t] : params) {
    prev_flags.push_back(t.requires_grad());
    Tensor h = t;
    h.set_requires_grad(true);
    h.zero_grad();
  }
  double f0 = 0.0;
  {
    Tensor out = f();
    if (out.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
    f0 = out.item();
    if (!std::isfinite(f0)) throw EvaluationError("grad_check: function value is not finite");
    out.backward();
  }
  const double floor = options.floor * std::max(1.0, std::abs(f0));

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].second;
    const std::size_t n = t.numel();
    std::vector<double> analytic(n, 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords && options.max_coords < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }

    ParamGradCheck pc;
    pc.name = params[pi].first;
    pc.coords = coords.size();
    auto values = t.data();
    for (std::size_t c : coords) {
      const double orig = values[c];
      values[c] = orig + options.eps;
      const double up = eval_scalar(f);
      values[c] = orig - options.eps;
      const double down = eval_scalar(f);
      values[c] = orig;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double abs_err = std::abs(analytic[c] - numeric);
      const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), floor});
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      pc.max_rel_error = std::max(pc.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(std::move(pc));
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor h = params[pi].second;
    h.zero_grad();
    h.set_requires_grad(prev_flags[pi]);
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace refseg
