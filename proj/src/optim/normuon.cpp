// SPDX-License-Identifier: Apache-2.0

#include "deskpt/optim/normuon.hpp"

#include <algorithm>
#include <cmath>

#include "deskpt/error.hpp"

namespace deskpt {

namespace {

template <Real T>
void require_finite(const Tensor<T>& grad, const char* who) {
  if (!all_finite<T>(grad.data())) throw NumericError(std::string(who) + ": non-finite gradient");
}

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(who) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <Real T>
Tensor<T> neuron_normalize(const Tensor<T>& u, Tensor<T>& row_v, std::int64_t step,
                           const NorMuonOptions& options) {
  if (u.rank() != 2) throw ShapeError("neuron_normalize expects a matrix");
  const auto rows = u.dim(0), cols = u.dim(1);
  if (!row_v.defined()) row_v = Tensor<T>({rows});
  if (row_v.numel() != rows) throw ShapeError("neuron_normalize: row state size mismatch");
  if (step < 1) throw Error("neuron_normalize: step is 1-based");

  auto src = u.data();
  auto v = row_v.mutable_data();
  const double correction = 1.0 - std::pow(options.beta2, static_cast<double>(step));
  Tensor<T> out({rows, cols});
  auto dst = out.mutable_data();
  double in_sq = 0.0, out_sq = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double x = src[static_cast<std::size_t>(r * cols + c)];
      ms += x * x;
    }
    in_sq += ms;
    ms /= static_cast<double>(cols);
    const double vr = options.beta2 * v[static_cast<std::size_t>(r)] + (1.0 - options.beta2) * ms;
    v[static_cast<std::size_t>(r)] = static_cast<T>(vr);
    const double inv = 1.0 / std::sqrt(vr / correction + options.eps);
    for (std::int64_t c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      const double y = src[i] * inv;
      dst[i] = static_cast<T>(y);
      out_sq += y * y;
    }
  }
  double factor = std::sqrt(std::max(1.0, static_cast<double>(rows) / static_cast<double>(cols)));
  if (options.rms_match && out_sq > 0.0) factor *= std::sqrt(in_sq / out_sq);
  for (auto& x : dst) x = static_cast<T>(x * factor);
  return out;
}

template <Real T>
Tensor<T> cautious_decay_mask(const Tensor<T>& u, const Tensor<T>& w) {
  require_same_shape(u, w, "cautious_decay_mask");
  Tensor<T> mask(u.shape());
  auto m = mask.mutable_data();
  auto a = u.data(), b = w.data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = (a[i] > 0 && b[i] > 0) || (a[i] < 0 && b[i] < 0) ? T(1) : T(0);
  }
  return mask;
}

template <Real T>
NorMuonStepInfo<T> normuon_step(const Tensor<T>& w, const Tensor<T>& grad, NorMuonState<T>& state,
                                double eta, double lambda, const NorMuonOptions& options) {
  require_same_shape(w, grad, "normuon_step");
  require_finite(grad, "normuon_step");
  if (w.rank() != 2) throw ShapeError("normuon_step expects a matrix");
  if (!state.momentum.defined()) state.momentum = Tensor<T>(w.shape());
  ++state.step;

  auto g = grad.data();
  auto mom = state.momentum.mutable_data();
  Tensor<T> direction(w.shape());
  auto dir = direction.mutable_data();
  const T mu = static_cast<T>(options.momentum);
  for (std::size_t i = 0; i < g.size(); ++i) {
    mom[i] = mu * mom[i] + g[i];
    if (options.raw_gradient) {
      dir[i] = g[i];
    } else {
      dir[i] = options.nesterov ? g[i] + mu * mom[i] : mom[i];
    }
  }

  Tensor<T> u = neuron_normalize(ns_orthogonalize(direction, options.ns), state.row_v, state.step,
                                 options);
  Tensor<T> mask = options.cautious ? cautious_decay_mask(u, w) : Tensor<T>::filled(w.shape(), T(1));
  auto wd = w.mutable_data();
  auto ud = u.data();
  auto md = mask.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    wd[i] -= static_cast<T>(eta * (ud[i] + lambda * md[i] * wd[i]));
  }
  return {u, mask};
}

template <Real T>
void adamw_step(const Tensor<T>& w, const Tensor<T>& grad, AdamWState<T>& state, double eta,
                double lambda, const AdamWOptions& options) {
  require_same_shape(w, grad, "adamw_step");
  require_finite(grad, "adamw_step");
  if (!state.m.defined()) state.m = Tensor<T>(w.shape());
  if (!state.v.defined()) state.v = Tensor<T>(w.shape());
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  auto g = grad.data();
  auto m = state.m.mutable_data();
  auto v = state.v.mutable_data();
  auto wd = w.mutable_data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    const double gi = g[i];
    const double mi = options.beta1 * m[i] + (1.0 - options.beta1) * gi;
    const double vi = options.beta2 * v[i] + (1.0 - options.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double step = (mi / c1) / (std::sqrt(vi / c2) + options.eps);
    wd[i] = static_cast<T>(wd[i] - eta * (step + lambda * wd[i]));
  }
}

#define DESKPT_INSTANTIATE_OPTIM(T)                                                          \
  template Tensor<T> neuron_normalize(const Tensor<T>&, Tensor<T>&, std::int64_t,            \
                                      const NorMuonOptions&);                                \
  template Tensor<T> cautious_decay_mask(const Tensor<T>&, const Tensor<T>&);                \
  template NorMuonStepInfo<T> normuon_step(const Tensor<T>&, const Tensor<T>&,               \
                                           NorMuonState<T>&, double, double,                 \
                                           const NorMuonOptions&);                           \
  template void adamw_step(const Tensor<T>&, const Tensor<T>&, AdamWState<T>&, double,       \
                           double, const AdamWOptions&);

DESKPT_INSTANTIATE_OPTIM(float)
DESKPT_INSTANTIATE_OPTIM(double)

#undef DESKPT_INSTANTIATE_OPTIM

}  // namespace deskpt
