// SPDX-License-Identifier: Apache-2.0

#include "deskpt/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "deskpt/error.hpp"
#include "deskpt/tensor/graph.hpp"

namespace deskpt {

namespace {
double evaluate(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs) {
  NoGradScope<double> no_grad;
  Tensor<double> out = f(inputs);
  if (out.numel() != 1) throw GraphError("grad_check function must return a scalar");
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}
}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                           double eps) {
  std::vector<bool> previous;
  for (const auto& t : inputs) {
    previous.push_back(t.requires_grad());
    t.clear_grad();
    t.set_requires_grad(true);
  }

  std::vector<std::vector<double>> analytic;
  {
    Graph<double> graph;
    GraphScope<double> scope(graph);
    Tensor<double> out = f(inputs);
    if (out.numel() != 1) throw GraphError("grad_check function must return a scalar");
    if (!std::isfinite(out.item())) throw NumericError("grad_check: non-finite function value");
    graph.backward(out);
  }
  for (const auto& t : inputs) {
    auto g = t.grad_tensor();
    analytic.emplace_back(g.data().begin(), g.data().end());
    if (!all_finite<double>(analytic.back())) {
      throw NumericError("grad_check: non-finite analytic gradient");
    }
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = evaluate(f, inputs);
      values[i] = saved - eps;
      const double minus = evaluate(f, inputs);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      if (err > result.max_relative_error || (k == 0 && i == 0)) {
        result = {err, k, i, a, numeric};
      }
    }
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].clear_grad();
    inputs[k].set_requires_grad(previous[k]);
  }
  return result;
}

}  // namespace deskpt
