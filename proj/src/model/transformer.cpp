// SPDX-License-Identifier: Apache-2.0

#include "deskpt/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "deskpt/error.hpp"
#include "deskpt/model/layers.hpp"
#include "deskpt/tensor/ops.hpp"

namespace deskpt {

std::string_view role_name(ParamRole role) {
  switch (role) {
    case ParamRole::embedding: return "embedding";
    case ParamRole::lm_head: return "lm_head";
    case ParamRole::norm_gain: return "norm_gain";
    case ParamRole::qk_gain: return "qk_gain";
    case ParamRole::value_mix: return "value_mix";
    case ParamRole::attn_proj: return "attn_proj";
    case ParamRole::gate_proj: return "gate_proj";
    case ParamRole::ffn_proj: return "ffn_proj";
  }
  return "unknown";
}

namespace {

// Each parameter draws from its own stream keyed by name, so toggling an
// intervention never shifts the initial values of the others.
std::uint64_t param_stream_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string layer_prefix(std::int64_t layer) { return "layers." + std::to_string(layer - 1) + "."; }

}  // namespace

template <Real T>
Transformer<T>::Transformer(ModelConfig config, std::uint64_t seed, InitOptions init)
    : config_(config), seed_(seed) {
  config_.validate();
  const auto d = config_.d_model;
  const auto kv_width = config_.n_kv_heads * config_.head_dim;
  const double hidden = init.hidden_std_mult;
  auto fan_in_std = [](std::int64_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  add_param("tok_embed", ParamRole::embedding, 0, {config_.vocab_size, d}, init.embed_std, 0.0);
  for (std::int64_t l = 1; l <= config_.n_layers; ++l) {
    const auto p = layer_prefix(l);
    add_param(p + "attn_norm.gain", ParamRole::norm_gain, l, {d}, 0.0, 1.0);
    add_param(p + "attn.wq", ParamRole::attn_proj, l, {d, d}, hidden * fan_in_std(d), 0.0);
    add_param(p + "attn.wk", ParamRole::attn_proj, l, {kv_width, d}, hidden * fan_in_std(d), 0.0);
    add_param(p + "attn.wv", ParamRole::attn_proj, l, {kv_width, d}, hidden * fan_in_std(d), 0.0);
    add_param(p + "attn.wo", ParamRole::attn_proj, l, {d, d}, hidden * fan_in_std(d), 0.0);
    if (config_.toggles.qk_norm) {
      add_param(p + "attn.qk_gain", ParamRole::qk_gain, l, {1}, 0.0, 1.0);
    }
    if (config_.toggles.gating) {
      add_param(p + "attn.gate", ParamRole::gate_proj, l, {config_.n_heads, d}, 0.0, 0.0);
    }
    if (config_.toggles.value_residual) {
      add_param(p + "attn.vr_scale", ParamRole::value_mix, l, {1}, 0.0, 1.0);
      add_param(p + "attn.vr_alpha1", ParamRole::value_mix, l, {1}, 0.0, 1.0);
      add_param(p + "attn.vr_alpha2", ParamRole::value_mix, l, {1}, 0.0, 0.0);
    }
    add_param(p + "ffn_norm.gain", ParamRole::norm_gain, l, {d}, 0.0, 1.0);
    add_param(p + "ffn.w1", ParamRole::ffn_proj, l, {config_.ffn_dim, d}, hidden * fan_in_std(d), 0.0);
    add_param(p + "ffn.w3", ParamRole::ffn_proj, l, {config_.ffn_dim, d}, hidden * fan_in_std(d), 0.0);
    add_param(p + "ffn.w2", ParamRole::ffn_proj, l, {d, config_.ffn_dim},
              hidden * fan_in_std(config_.ffn_dim), 0.0);
  }
  add_param("final_norm.gain", ParamRole::norm_gain, 0, {d}, 0.0, 1.0);
  add_param("lm_head", ParamRole::lm_head, 0, {config_.vocab_size, d},
            init.lm_head_std_mult * fan_in_std(d), 0.0);
}

template <Real T>
void Transformer<T>::add_param(std::string name, ParamRole role, std::int64_t layer, Shape shape,
                               double stddev, double constant) {
  std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)), static_cast<T>(constant));
  if (stddev > 0.0) {
    std::mt19937_64 rng(param_stream_seed(seed_, name));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : values) v = static_cast<T>(dist(rng));
  }
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back(NamedParameter<T>{std::move(name), role, layer, std::move(t)});
}

template <Real T>
const Tensor<T>& Transformer<T>::param(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + std::string(name) + "'");
  return params_[it->second].tensor;
}

template <Real T>
bool Transformer<T>::has_param(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <Real T>
std::int64_t Transformer<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <Real T>
Tensor<T> Transformer<T>::forward(std::span<const std::int32_t> tokens, std::int64_t batch,
                                  std::int64_t seq, ForwardTrace<T>* trace) const {
  const auto& c = config_;
  if (batch * seq != static_cast<std::int64_t>(tokens.size())) {
    throw ShapeError("token buffer does not match (batch, seq)");
  }
  if (seq > c.max_context) {
    throw ShapeError("sequence of " + std::to_string(seq) + " exceeds max_context " +
                     std::to_string(c.max_context));
  }
  if (trace) *trace = ForwardTrace<T>{};

  std::vector<std::int64_t> positions(static_cast<std::size_t>(seq));
  for (std::int64_t t = 0; t < seq; ++t) positions[static_cast<std::size_t>(t)] = t;
  const std::int64_t group = c.n_heads / c.n_kv_heads;

  Tensor<T> x = ops::embed_lookup(param("tok_embed"), tokens, {batch, seq});
  Tensor<T> v_first;
  for (std::int64_t l = 1; l <= c.n_layers; ++l) {
    const auto p = layer_prefix(l);
    Tensor<T> h = layers::norm_scaled(x, param(p + "attn_norm.gain"), l, c.toggles.ln_scaling);
    Tensor<T> q = ops::reshape(ops::matmul(h, param(p + "attn.wq"), true),
                               {batch, seq, c.n_heads, c.head_dim});
    Tensor<T> k = ops::reshape(ops::matmul(h, param(p + "attn.wk"), true),
                               {batch, seq, c.n_kv_heads, c.head_dim});
    Tensor<T> v = ops::reshape(ops::matmul(h, param(p + "attn.wv"), true),
                               {batch, seq, c.n_kv_heads, c.head_dim});
    q = layers::rope_apply(q, positions, c.rope_theta);
    k = layers::rope_apply(k, positions, c.rope_theta);
    if (c.toggles.value_residual) {
      if (l == 1) v_first = v;
      v = layers::mix_value_residual(v, v_first, param(p + "attn.vr_scale"),
                                     param(p + "attn.vr_alpha1"), param(p + "attn.vr_alpha2"));
    }
    k = layers::repeat_kv(k, group);
    v = layers::repeat_kv(v, group);

    Tensor<T> logits, probs;
    Tensor<T> attn = layers::qk_norm_attention(
        q, k, v, c.toggles.qk_norm ? param(p + "attn.qk_gain") : Tensor<T>{}, c.toggles.qk_norm,
        trace ? &logits : nullptr, trace ? &probs : nullptr);
    if (c.toggles.gating) attn = layers::gate_heads(attn, h, param(p + "attn.gate"));
    x = ops::add(x, ops::matmul(ops::reshape(attn, {batch, seq, c.d_model}),
                                param(p + "attn.wo"), true));

    Tensor<T> h2 = layers::norm_scaled(x, param(p + "ffn_norm.gain"), l, c.toggles.ln_scaling);
    x = ops::add(x, layers::swiglu_ffn(h2, param(p + "ffn.w1"), param(p + "ffn.w2"),
                                       param(p + "ffn.w3")));
    if (trace) {
      trace->attention_logits.push_back(logits);
      trace->attention_probs.push_back(probs);
      trace->residual.push_back(x);
    }
  }
  Tensor<T> h = ops::mul(ops::rms_normalize(x), param("final_norm.gain"));
  Tensor<T> logits = ops::matmul(h, param("lm_head"), true);
  if (c.output_scale != 1.0) logits = ops::scale(logits, static_cast<T>(c.output_scale));
  return logits;
}

template <Real T>
std::map<std::string, Tensor<T>> Transformer<T>::gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& p : params_) out.emplace(p.name, p.tensor.grad_tensor());
  return out;
}

template <Real T>
void Transformer<T>::zero_grad() const {
  for (const auto& p : params_) p.tensor.zero_grad();
}

template <Real T>
void Transformer<T>::set_requires_grad(bool flag) const {
  for (const auto& p : params_) p.tensor.set_requires_grad(flag);
}

template class Transformer<float>;
template class Transformer<double>;

template <Real T>
LossOutput<T> loss_ce_zloss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask, double lambda_z) {
  const std::int64_t vocab = logits.dim(-1);
  const std::int64_t rows = logits.numel() / vocab;
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    throw ShapeError("loss: expected one target per position");
  }
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != rows) {
    throw ShapeError("loss: mask must cover every position");
  }
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < rows; ++r) count += mask.empty() || mask[r] ? 1 : 0;
  if (count == 0) throw Error("loss: every position is masked");

  Tensor<T> z = ops::reshape(logits, {rows, vocab});
  std::vector<T> row_max(static_cast<std::size_t>(rows));
  std::vector<T> onehot(static_cast<std::size_t>(rows * vocab), T(0));
  std::vector<T> weight(static_cast<std::size_t>(rows), T(0));
  {
    auto zd = z.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto begin = zd.begin() + r * vocab;
      row_max[static_cast<std::size_t>(r)] = *std::max_element(begin, begin + vocab);
      const std::int32_t target = targets[static_cast<std::size_t>(r)];
      const bool counted = mask.empty() || mask[static_cast<std::size_t>(r)];
      if (counted && (target < 0 || target >= vocab)) {
        throw ShapeError("loss: target id " + std::to_string(target) + " outside vocabulary");
      }
      if (counted) {
        onehot[static_cast<std::size_t>(r * vocab + target)] = T(1);
        weight[static_cast<std::size_t>(r)] = T(1) / static_cast<T>(count);
      }
    }
  }
  Tensor<T> shift({rows, 1}, row_max);
  Tensor<T> shift_flat({rows}, std::move(row_max));
  Tensor<T> lse = ops::add(ops::log(ops::sum(ops::exp(ops::sub(z, shift)), 1)), shift_flat);
  Tensor<T> picked = ops::sum(ops::mul(z, Tensor<T>({rows, vocab}, std::move(onehot))), 1);
  Tensor<T> w({rows}, std::move(weight));
  Tensor<T> ce = ops::sum(ops::mul(ops::sub(lse, picked), w));
  Tensor<T> z_term = ops::scale(ops::sum(ops::mul(ops::square(lse), w)), static_cast<T>(lambda_z));
  return {ops::add(ce, z_term), ce, z_term};
}

template LossOutput<float> loss_ce_zloss(const Tensor<float>&, std::span<const std::int32_t>,
                                         std::span<const std::uint8_t>, double);
template LossOutput<double> loss_ce_zloss(const Tensor<double>&, std::span<const std::int32_t>,
                                          std::span<const std::uint8_t>, double);

}  // namespace deskpt
