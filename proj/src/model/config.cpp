// SPDX-License-Identifier: Apache-2.0

#include "deskpt/model/config.hpp"

#include <string>

#include "deskpt/error.hpp"

namespace deskpt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (n_heads < 1 || n_kv_heads < 1) fail("head counts must be positive");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (d_model != n_heads * head_dim) fail("d_model must equal n_heads * head_dim");
  if (head_dim % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (ffn_dim < 1) fail("ffn_dim must be positive");
  if (max_context < 1) fail("max_context must be positive");
  if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
  if (!(output_scale > 0.0)) fail("output_scale must be positive");
}

void to_json(nlohmann::json& j, const ArchToggles& t) {
  j = {{"qk_norm", t.qk_norm},
       {"gating", t.gating},
       {"value_residual", t.value_residual},
       {"ln_scaling", t.ln_scaling}};
}

void from_json(const nlohmann::json& j, ArchToggles& t) {
  t.qk_norm = j.value("qk_norm", t.qk_norm);
  t.gating = j.value("gating", t.gating);
  t.value_residual = j.value("value_residual", t.value_residual);
  t.ln_scaling = j.value("ln_scaling", t.ln_scaling);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},         {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},         {"n_kv_heads", c.n_kv_heads},
       {"head_dim", c.head_dim},       {"ffn_dim", c.ffn_dim},
       {"vocab_size", c.vocab_size},   {"rope_theta", c.rope_theta},
       {"max_context", c.max_context}, {"toggles", c.toggles},
       {"output_scale", c.output_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
  c.head_dim = j.value("head_dim", c.d_model / c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.max_context = j.value("max_context", c.max_context);
  if (j.contains("toggles")) c.toggles = j.at("toggles").get<ArchToggles>();
  c.output_scale = j.value("output_scale", c.output_scale);
}

}  // namespace deskpt
