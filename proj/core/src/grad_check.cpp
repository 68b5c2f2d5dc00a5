// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace ipa {
namespace {

double evaluate(const GradCheckLoss& loss_fn, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const Tensor<double>& p : params) leaves.push_back(tape.leaf(p, false));
  const Var<double> loss = loss_fn(tape, leaves);
  const double v = loss.value().item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport grad_check_report(const GradCheckLoss& loss_fn, std::vector<Tensor<double>> params,
                                  double epsilon) {
  if (!(epsilon > 0.0)) throw DomainError("grad_check: epsilon must be positive");

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const Tensor<double>& p : params) leaves.push_back(tape.leaf(p, true));
    const Var<double> loss = loss_fn(tape, leaves);
    if (!std::isfinite(loss.value().item())) throw NumericalError("grad_check: non-finite loss");
    tape.backward(loss);
    for (const Var<double>& leaf : leaves) analytic.push_back(tape.grad(leaf));
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double original = params[p][i];
      auto at = [&](double offset) {
        params[p][i] = original + offset;
        return evaluate(loss_fn, params);
      };
      const double f2p = at(2.0 * epsilon), f1p = at(epsilon);
      const double f1m = at(-epsilon), f2m = at(-2.0 * epsilon);
      params[p][i] = original;
      const double numeric = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * epsilon);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_relative_error) {
        report = GradCheckReport{err, p, i, a, numeric};
      }
    }
  }
  return report;
}

double grad_check(const GradCheckLoss& loss_fn, std::vector<Tensor<double>> params, double epsilon) {
  return grad_check_report(loss_fn, std::move(params), epsilon).max_relative_error;
}

}  // namespace ipa
