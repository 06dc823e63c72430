// SPDX-License-Identifier: Apache-2.0

#include "deskpt/model/layers.hpp"

#include <cmath>

#include "deskpt/error.hpp"
#include "deskpt/tensor/ops.hpp"

namespace deskpt::layers {

template <Real T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<std::int64_t>& positions,
                     double theta) {
  if (x.rank() < 3) throw ShapeError("rope_apply expects (..., T, n, d_h)");
  const std::int64_t seq = x.dim(-3);
  const std::int64_t head_dim = x.dim(-1);
  if (head_dim % 2 != 0) throw ShapeError("rope_apply needs an even head dimension");
  if (static_cast<std::int64_t>(positions.size()) != seq) {
    throw ShapeError("rope_apply: one position per sequence step required");
  }
  std::vector<T> cos_table(static_cast<std::size_t>(seq * head_dim));
  std::vector<T> sin_table(cos_table.size());
  for (std::int64_t t = 0; t < seq; ++t) {
    for (std::int64_t i = 0; i < head_dim / 2; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(positions[static_cast<std::size_t>(t)]) * freq;
      for (std::int64_t c = 2 * i; c < 2 * i + 2; ++c) {
        cos_table[static_cast<std::size_t>(t * head_dim + c)] = static_cast<T>(std::cos(angle));
        sin_table[static_cast<std::size_t>(t * head_dim + c)] = static_cast<T>(std::sin(angle));
      }
    }
  }
  Tensor<T> cos_t({seq, 1, head_dim}, std::move(cos_table));
  Tensor<T> sin_t({seq, 1, head_dim}, std::move(sin_table));
  return ops::add(ops::mul(x, cos_t), ops::mul(ops::rotate_half(x), sin_t));
}

template <Real T>
Tensor<T> norm_scaled(const Tensor<T>& x, const Tensor<T>& gain, std::int64_t layer,
                      bool ln_scaling) {
  if (layer < 1) throw ShapeError("norm_scaled: layer index is 1-based");
  Tensor<T> y = ops::mul(ops::rms_normalize(x), gain);
  if (ln_scaling && layer > 1) {
    y = ops::scale(y, static_cast<T>(1.0 / std::sqrt(static_cast<double>(layer))));
  }
  return y;
}

template <Real T>
Tensor<T> qk_norm_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const Tensor<T>& gamma, bool qk_norm, Tensor<T>* logits_out,
                            Tensor<T>* probs_out) {
  if (q.rank() != 4 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("attention expects matching (B, T, H, d_h) inputs, got " +
                     shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  }
  const std::int64_t head_dim = q.dim(-1);
  Tensor<T> qh = ops::transpose(q, 1, 2);
  Tensor<T> kh = ops::transpose(k, 1, 2);
  Tensor<T> vh = ops::transpose(v, 1, 2);
  if (qk_norm) {
    qh = ops::mul(ops::rms_normalize(qh), gamma);
    kh = ops::rms_normalize(kh);
  } else {
    qh = ops::scale(qh, static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));
  }
  Tensor<T> logits = ops::matmul(qh, kh, true);
  Tensor<T> probs = ops::causal_softmax(logits);
  if (logits_out) *logits_out = logits;
  if (probs_out) *probs_out = probs;
  return ops::transpose(ops::matmul(probs, vh), 1, 2);
}

template <Real T>
Tensor<T> gate_heads(const Tensor<T>& heads, const Tensor<T>& x, const Tensor<T>& w_gate) {
  if (heads.rank() != 4) throw ShapeError("gate_heads expects (B, T, H, d_h) heads");
  Tensor<T> logits = ops::matmul(x, w_gate, true);
  Shape gate_shape = logits.shape();
  gate_shape.push_back(1);
  Tensor<T> gate = ops::scale(ops::reshape(ops::sigmoid(logits), gate_shape), T(2));
  return ops::mul(heads, gate);
}

template <Real T>
Tensor<T> mix_value_residual(const Tensor<T>& v_local, const Tensor<T>& v_first,
                             const Tensor<T>& s, const Tensor<T>& alpha1,
                             const Tensor<T>& alpha2) {
  Tensor<T> mixed = ops::add(ops::mul(v_local, alpha1), ops::mul(v_first, alpha2));
  Tensor<T> norm = ops::sqrt(ops::add(ops::add(ops::square(alpha1), ops::square(alpha2)),
                                      Tensor<T>::scalar(static_cast<T>(kValueMixEps))));
  return ops::mul(mixed, ops::div(s, norm));
}

template <Real T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2,
                     const Tensor<T>& w3) {
  Tensor<T> hidden = ops::mul(ops::silu(ops::matmul(x, w1, true)), ops::matmul(x, w3, true));
  return ops::matmul(hidden, w2, true);
}

template <Real T>
Tensor<T> repeat_kv(const Tensor<T>& x, std::int64_t group) {
  if (group == 1) return x;
  const std::int64_t kv_heads = x.dim(2);
  std::vector<Tensor<T>> parts;
  parts.reserve(static_cast<std::size_t>(kv_heads * group));
  for (std::int64_t h = 0; h < kv_heads; ++h) {
    Tensor<T> head = ops::slice(x, 2, h, 1);
    for (std::int64_t r = 0; r < group; ++r) parts.push_back(head);
  }
  return ops::concat(parts, 2);
}

#define DESKPT_INSTANTIATE_LAYERS(T)                                                         \
  template Tensor<T> rope_apply(const Tensor<T>&, const std::vector<std::int64_t>&, double); \
  template Tensor<T> norm_scaled(const Tensor<T>&, const Tensor<T>&, std::int64_t, bool);    \
  template Tensor<T> qk_norm_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                       const Tensor<T>&, bool, Tensor<T>*, Tensor<T>*);      \
  template Tensor<T> gate_heads(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> mix_value_residual(const Tensor<T>&, const Tensor<T>&,                  \
                                        const Tensor<T>&, const Tensor<T>&,                  \
                                        const Tensor<T>&);                                   \
  template Tensor<T> swiglu_ffn(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                const Tensor<T>&);                                           \
  template Tensor<T> repeat_kv(const Tensor<T>&, std::int64_t);

DESKPT_INSTANTIATE_LAYERS(float)
DESKPT_INSTANTIATE_LAYERS(double)

#undef DESKPT_INSTANTIATE_LAYERS

}  // namespace deskpt::layers
