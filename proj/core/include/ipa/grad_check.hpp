// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ipa/autograd.hpp"

namespace ipa {

/// Builds a scalar loss from parameter leaves registered on the given tape.
using GradCheckLoss = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Absolute floor of the error denominator. Entries whose true gradient is
/// exactly zero only see difference-quotient round-off (~1e-12), which must
/// not read as a large relative error.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients against a fourth-order central difference with
/// step `epsilon`, all in 64-bit. The per-entry error is
/// |analytic - numeric| / max(|analytic|, |numeric|, kGradCheckFloor).
/// NumericalError when any loss evaluation is non-finite.
GradCheckReport grad_check_report(const GradCheckLoss& loss_fn, std::vector<Tensor<double>> params,
                                  double epsilon);

double grad_check(const GradCheckLoss& loss_fn, std::vector<Tensor<double>> params, double epsilon);

}  // namespace ipa
