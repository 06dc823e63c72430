// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "deskpt/optim/newton_schulz.hpp"
#include "deskpt/tensor/tensor.hpp"

namespace deskpt {

struct NorMuonOptions {
  double momentum = 0.95;
  bool nesterov = true;
  // Orthogonalize the raw gradient instead of the momentum lookahead.
  bool raw_gradient = false;
  double beta2 = 0.95;
  double eps = 1e-8;
  bool cautious = true;
  // Rescale the row-normalized update back to the Frobenius norm of the
  // orthogonalized one before the shape factor. Off gives unit row RMS.
  bool rms_match = true;
  NsOptions ns;
};

template <Real T>
struct NorMuonState {
  Tensor<T> momentum;  // same shape as the weight
  Tensor<T> row_v;     // one entry per output row
  std::int64_t step = 0;
};

// Per-row second-moment normalization of an orthogonalized update (rows are
// output neurons). Updates row_v in place; `step` is the 1-based count used
// for bias correction.
template <Real T>
Tensor<T> neuron_normalize(const Tensor<T>& u, Tensor<T>& row_v, std::int64_t step,
                           const NorMuonOptions& options = {});

// 1 where sign(u) == sign(w) and both are nonzero.
template <Real T>
Tensor<T> cautious_decay_mask(const Tensor<T>& u, const Tensor<T>& w);

template <Real T>
struct NorMuonStepInfo {
  Tensor<T> update;  // normalized direction before the learning rate
  Tensor<T> mask;    // decay mask (all ones without cautious decay)
};

// W <- W - eta * (u + lambda * mask * W). `w` is modified in place.
template <Real T>
NorMuonStepInfo<T> normuon_step(const Tensor<T>& w, const Tensor<T>& grad, NorMuonState<T>& state,
                                double eta, double lambda, const NorMuonOptions& options = {});

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

template <Real T>
struct AdamWState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t step = 0;
};

// Bias-corrected AdamW with decoupled decay; `w` is modified in place.
template <Real T>
void adamw_step(const Tensor<T>& w, const Tensor<T>& grad, AdamWState<T>& state, double eta,
                double lambda, const AdamWOptions& options = {});

}  // namespace deskpt
