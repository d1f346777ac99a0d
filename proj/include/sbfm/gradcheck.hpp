#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "sbfm/tape.hpp"
#include "sbfm/tensor.hpp"

namespace sbfm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose relative error exceeded the tolerance. A hard
  // threshold in the function shows up here: its surrogate gradient is not
  // what finite differences see.
  std::size_t mismatches = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

// Compares the analytic gradient of loss() w.r.t. `target` (read from
// target.grad after one backward pass) with central differences at the given
// coordinates (all of them when `coords` is empty). `target` must be watched
// by loss() via Tape::parameter and is restored on return.
inline GradCheckReport grad_check_tensor(Tensor& target, const std::function<Var(Tape&)>& loss,
                                         std::span<const std::size_t> coords = {},
                                         GradCheckOptions opt = {}) {
  const bool saved_flag = target.requires_grad;
  target.requires_grad = true;
  target.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  const std::vector<double> analytic = target.grad;
  target.clear_grad();

  auto eval = [&] {
    Tape tape;
    return loss(tape).value().values[0];
  };

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(target.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }

  GradCheckReport report;
  for (std::size_t idx : coords) {
    const double x0 = target.values[idx];
    target.values[idx] = x0 + opt.h;
    const double fp = eval();
    target.values[idx] = x0 - opt.h;
    const double fm = eval();
    target.values[idx] = x0;
    const double numeric = (fp - fm) / (2.0 * opt.h);
    const double a = analytic[idx];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
    ++report.checked;
    if (rel > opt.tol) ++report.mismatches;
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = idx;
    }
  }
  report.passed = report.mismatches == 0;
  target.requires_grad = saved_flag;
  return report;
}

// Gradient check of a scalar function of one tensor.
inline GradCheckReport grad_check(const std::function<Var(Var)>& f, const Tensor& x,
                                  double h = 1e-5, double tol = 1e-4) {
  Tensor probe(x.shape, x.values);
  return grad_check_tensor(
      probe, [&](Tape& tape) { return f(tape.parameter(probe)); }, {},
      GradCheckOptions{h, tol, 1e-6});
}

}  // namespace sbfm
