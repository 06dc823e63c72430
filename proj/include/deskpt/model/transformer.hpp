// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deskpt/model/config.hpp"
#include "deskpt/tensor/tensor.hpp"

namespace deskpt {

enum class ParamRole {
  embedding,
  lm_head,
  norm_gain,
  qk_gain,
  value_mix,
  attn_proj,
  gate_proj,
  ffn_proj,
};

std::string_view role_name(ParamRole role);

template <Real T>
struct NamedParameter {
  std::string name;
  ParamRole role;
  // 1-based block index; 0 for embeddings, the final norm, and lm_head.
  std::int64_t layer = 0;
  Tensor<T> tensor;
};

// Init standard deviations. Matrices default to 1/sqrt(fan_in) times
// hidden_std_mult; the embedding table uses embed_std directly.
struct InitOptions {
  double embed_std = 1.0;
  double hidden_std_mult = 1.0;
  double lm_head_std_mult = 0.0;
};

template <Real T>
struct ForwardTrace {
  // Per layer: (B, H, T, T) pre-softmax logits and probabilities, and the
  // (B, T, d) residual stream after the block.
  std::vector<Tensor<T>> attention_logits;
  std::vector<Tensor<T>> attention_probs;
  std::vector<Tensor<T>> residual;
};

template <Real T>
class Transformer {
 public:
  Transformer(ModelConfig config, std::uint64_t seed, InitOptions init = {});

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  const Tensor<T>& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::int64_t parameter_count() const;

  // tokens: row-major (batch, seq). Returns logits (batch, seq, vocab).
  Tensor<T> forward(std::span<const std::int32_t> tokens, std::int64_t batch, std::int64_t seq,
                    ForwardTrace<T>* trace = nullptr) const;

  std::map<std::string, Tensor<T>> gradients() const;
  void zero_grad() const;
  void set_requires_grad(bool flag) const;

  // Same parameters at another precision.
  template <Real U>
  Transformer<U> converted() const;

 private:
  template <Real U>
  friend class Transformer;
  Transformer() = default;

  void add_param(std::string name, ParamRole role, std::int64_t layer, Shape shape,
                 double stddev, double constant);

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<NamedParameter<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

template <Real T>
template <Real U>
Transformer<U> Transformer<T>::converted() const {
  Transformer<U> out;
  out.config_ = config_;
  out.seed_ = seed_;
  for (const auto& p : params_) {
    Tensor<U> t = cast<U>(p.tensor);
    t.set_requires_grad(p.tensor.requires_grad());
    out.index_[p.name] = out.params_.size();
    out.params_.push_back(NamedParameter<U>{p.name, p.role, p.layer, t});
  }
  return out;
}

template <Real T>
struct LossOutput {
  Tensor<T> total;   // ce + z_term
  Tensor<T> ce;      // mean cross-entropy over unmasked positions
  Tensor<T> z_term;  // lambda_z * mean log^2(sum exp z) over unmasked positions
};

inline constexpr double kDefaultZLoss = 1e-4;

// logits: (..., V). targets and mask hold one entry per position; mask may be
// empty (all positions count). Throws Error when every position is masked.
template <Real T>
LossOutput<T> loss_ce_zloss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask, double lambda_z = kDefaultZLoss);

}  // namespace deskpt
