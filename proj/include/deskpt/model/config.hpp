// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "json.hpp"

namespace deskpt {

// The four architectural interventions; all off gives a plain pre-norm
// RMSNorm/SwiGLU/RoPE/GQA decoder.
struct ArchToggles {
  bool qk_norm = true;
  bool gating = true;
  bool value_residual = true;
  bool ln_scaling = true;

  static ArchToggles none() { return {false, false, false, false}; }
  static ArchToggles all() { return {true, true, true, true}; }
  bool operator==(const ArchToggles&) const = default;
};

struct ModelConfig {
  std::int64_t d_model = 64;
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 4;
  std::int64_t n_kv_heads = 2;
  std::int64_t head_dim = 16;
  std::int64_t ffn_dim = 172;
  std::int64_t vocab_size = 258;
  double rope_theta = 10000.0;
  std::int64_t max_context = 256;
  ArchToggles toggles;
  // Multiplier on the output logits (1 unless muP rescales it).
  double output_scale = 1.0;

  // Throws ConfigError on violated invariants.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ArchToggles& t);
void from_json(const nlohmann::json& j, ArchToggles& t);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace deskpt
