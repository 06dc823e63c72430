// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "deskpt/tensor/tensor.hpp"

// Transformer building blocks composed from the differentiable op set.
namespace deskpt::layers {

// Rotates channel pairs (2i, 2i+1) of x: (..., T, n, d_h) by
// positions[t] * theta^(-2i/d_h). Throws ShapeError for odd d_h.
template <Real T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<std::int64_t>& positions,
                     double theta = 10000.0);

// gain * rms_normalize(x), times 1/sqrt(layer) when depth scaling is on.
// `layer` is 1-based.
template <Real T>
Tensor<T> norm_scaled(const Tensor<T>& x, const Tensor<T>& gain, std::int64_t layer,
                      bool ln_scaling);


// Causal attention over Q, K, V shaped (B, T, H, d_h); K and V must already
// be repeated to H heads. With qk_norm the logits are
//   gamma * rms_normalize(q) . rms_normalize(k)
// with no 1/sqrt(d_h); otherwise q . k / sqrt(d_h). Returns (B, T, H, d_h).
// When logits_out/probs_out are non-null they receive (B, H, T, T) copies.
template <Real T>
Tensor<T> qk_norm_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const Tensor<T>& gamma, bool qk_norm,
                            Tensor<T>* logits_out = nullptr, Tensor<T>* probs_out = nullptr);

// heads: (B, T, H, d_h); x: (B, T, d); w_gate: (H, d).
// out_h = 2 * sigmoid(x . w_gate_h) * head_h.
template <Real T>
Tensor<T> gate_heads(const Tensor<T>& heads, const Tensor<T>& x, const Tensor<T>& w_gate);

inline constexpr double kValueMixEps = 1e-8;

// s * (a1 * v_local + a2 * v_first) / sqrt(a1^2 + a2^2 + 1e-8); s, a1, a2 have one element.
template <Real T>
Tensor<T> mix_value_residual(const Tensor<T>& v_local, const Tensor<T>& v_first,
                             const Tensor<T>& s, const Tensor<T>& alpha1,
                             const Tensor<T>& alpha2);

// (silu(x W1^T) * (x W3^T)) W2^T with W1, W3: (ffn, d) and W2: (d, ffn).
template <Real T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2,
                     const Tensor<T>& w3);

// Repeats (B, T, H_kv, d_h) heads to (B, T, H_kv * group, d_h); query head h
// reads kv head h / group.
template <Real T>
Tensor<T> repeat_kv(const Tensor<T>& x, std::int64_t group);

}  // namespace deskpt::layers
