// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "deskpt/tensor/tensor.hpp"

namespace deskpt {

using ScalarFunction = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Compares reverse-mode gradients of `f` against central differences,
// coordinate by coordinate:
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// Inputs are perturbed in place and restored. Throws NumericError when any
// evaluation is non-finite.
GradCheckResult grad_check(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                           double eps = 1e-5);

}  // namespace deskpt
