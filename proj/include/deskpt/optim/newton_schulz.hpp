// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>
#include <vector>

#include "deskpt/tensor/tensor.hpp"

namespace deskpt {

// One odd-polynomial step X <- aX + b(XX^T)X + c(XX^T)^2 X.
struct NsCoefficients {
  double a;
  double b;
  double c;
};

enum class NsSchedule {
  polar_express,     // per-step minimax coefficients, safety-scaled
  standard_quintic,  // (3.4445, -4.7750, 2.0315) every step
};

std::string_view ns_schedule_name(NsSchedule schedule);
NsSchedule parse_ns_schedule(std::string_view name);

// Coefficient table for `steps` iterations. Tables shorter than `steps`
// repeat their final entry.
std::vector<NsCoefficients> ns_coefficients(NsSchedule schedule, int steps);

// Frobenius normalization applied before iterating. The polar-express table
// assumes the extra 1.01 headroom.
double ns_normalization_slack(NsSchedule schedule);

struct NsOptions {
  int steps = 7;
  NsSchedule schedule = NsSchedule::polar_express;
};

// Approximates the polar factor U V^T of a rank-2 matrix. A zero matrix is
// returned unchanged and *zero_input (when given) is set.
template <Real T>
Tensor<T> ns_orthogonalize(const Tensor<T>& m, const NsOptions& options = {},
                           bool* zero_input = nullptr);

// Scalar image of a singular value under the same iteration, after
// normalization has already been applied.
double ns_scalar_map(double sigma, const NsOptions& options = {});

}  // namespace deskpt
