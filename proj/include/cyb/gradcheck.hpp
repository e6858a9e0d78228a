#pragma once

#include "cyb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace cyb {

/// Outcome of comparing reverse-mode gradients with central differences.
struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_index = -1;
  Index checked = 0;
  bool passed = false;
};

/// Builds a scalar loss on `tape` from leaves holding the inputs.
template <typename Scalar>
using ScalarFn =
    std::function<BasicVar<Scalar>(BasicTape<Scalar>&, std::span<const BasicVar<Scalar>>)>;

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
inline double gradient_rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central-difference check of `f` w.r.t. every coordinate of every input.
template <typename Scalar>
GradCheckReport finite_diff_check(const ScalarFn<Scalar>& f,
                                  std::vector<BasicTensor<Scalar>> inputs, Scalar step,
                                  double tol) {
  if (!(step > 0) || step > Scalar(1e-3)) {
    throw std::invalid_argument("finite-difference step must lie in (0, 1e-3]");
  }
  auto evaluate = [&](bool want_grads, std::vector<BasicTensor<Scalar>>* grads) {
    BasicTape<Scalar> tape;
    std::vector<BasicVar<Scalar>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& x : inputs) leaves.push_back(tape.leaf_ref(x, want_grads));
    BasicVar<Scalar> out = f(tape, leaves);
    if (out.numel() != 1) {
      throw DimensionError("finite_diff_check needs a scalar-valued function, got shape " +
                           shape_str(out.shape()));
    }
    const Scalar value = out.value()[0];
    if (want_grads) {
      tape.backward(out);
      for (const auto& leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return value;
  };

  std::vector<BasicTensor<Scalar>> analytic;
  evaluate(true, &analytic);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index i = 0; i < inputs[k].numel(); ++i) {
      const Scalar saved = inputs[k][i];
      inputs[k][i] = saved + step;
      const Scalar up = evaluate(false, nullptr);
      inputs[k][i] = saved - step;
      const Scalar down = evaluate(false, nullptr);
      inputs[k][i] = saved;
      const double numeric = static_cast<double>((up - down) / (Scalar(2) * step));
      const double a = static_cast<double>(analytic[k][i]);
      const double rel = gradient_rel_error(a, numeric);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      if (rel > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_input = k;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

template <typename Scalar>
GradCheckReport finite_diff_check(
    const std::function<BasicVar<Scalar>(BasicTape<Scalar>&, BasicVar<Scalar>)>& f,
    BasicTensor<Scalar> x, Scalar step, double tol) {
  ScalarFn<Scalar> wrapped = [&f](BasicTape<Scalar>& t, std::span<const BasicVar<Scalar>> xs) {
    return f(t, xs[0]);
  };
  return finite_diff_check<Scalar>(wrapped, {std::move(x)}, step, tol);
}

}  // namespace cyb
