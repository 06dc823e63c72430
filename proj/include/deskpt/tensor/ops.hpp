// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deskpt/tensor/tensor.hpp"

// Differentiable op set. Binary elementwise ops broadcast numpy-style
// (right-aligned, size-1 or missing dims stretch). Every op records a node on
// the active graph when any operand requires grad.
namespace deskpt::ops {

// a: (..., M, K). b: (K, N) shared across the batch, or (..., K, N) with the
// same leading dims as a. With transpose_b, b is stored as (N, K) / (..., N, K).
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <Real T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <Real T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <Real T>
Tensor<T> exp(const Tensor<T>& x);
template <Real T>
Tensor<T> log(const Tensor<T>& x);
template <Real T>
Tensor<T> sqrt(const Tensor<T>& x);
template <Real T>
Tensor<T> square(const Tensor<T>& x);
template <Real T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <Real T>
Tensor<T> silu(const Tensor<T>& x);

// Full reductions return a rank-0 tensor; the axis forms drop that axis.
template <Real T>
Tensor<T> sum(const Tensor<T>& x);
template <Real T>
Tensor<T> sum(const Tensor<T>& x, int axis);
template <Real T>
Tensor<T> mean(const Tensor<T>& x);
template <Real T>
Tensor<T> mean(const Tensor<T>& x, int axis);

inline constexpr double kRmsEps = 1e-6;

// x / sqrt(mean(x^2) + eps) over the last axis.
template <Real T>
Tensor<T> rms_normalize(const Tensor<T>& x, double eps = kRmsEps);

// Softmax over the last axis of (..., T, T) with key j > query i masked to 0.
template <Real T>
Tensor<T> causal_softmax(const Tensor<T>& scores);

// table: (V, D). Output shape is ids_shape + (D).
template <Real T>
Tensor<T> embed_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                       const Shape& ids_shape);

template <Real T>
Tensor<T> transpose(const Tensor<T>& x, int dim0, int dim1);
// One extent may be -1.
template <Real T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <Real T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);

// Pairs (x_{2i}, x_{2i+1}) on the last axis map to (-x_{2i+1}, x_{2i}).
template <Real T>
Tensor<T> rotate_half(const Tensor<T>& x);

}  // namespace deskpt::ops
