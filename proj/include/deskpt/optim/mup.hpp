// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/optimizer.hpp"
#include "json.hpp"

namespace deskpt {

// Width-dependent parametrization. Hidden matrices keep 1/fan_in init
// variance; their learning rate and the output logits shrink as
// base_width / width. Embeddings and vector parameters are untouched.
struct MupSettings {
  bool enabled = false;
  std::int64_t base_width = 64;
  std::int64_t width = 64;
  double hidden_init_mult = 1.0;
  double hidden_lr_mult = 1.0;
  double embed_lr_mult = 1.0;
  double output_mult = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MupSettings& s);
void from_json(const nlohmann::json& j, MupSettings& s);

struct MupPlan {
  InitOptions init;
  double hidden_lr_mult = 1.0;
  double embed_lr_mult = 1.0;
  double output_scale = 1.0;
};

MupPlan mup_apply(const ModelConfig& config, const MupSettings& settings);

// Per-parameter LR multipliers for Optimizer.
template <Real T>
std::map<std::string, double> mup_lr_multipliers(const Transformer<T>& model, const MupPlan& plan);

struct CoordinateCheckOptions {
  std::vector<std::int64_t> widths = {64, 128, 256};
  int steps = 10;
  bool mup = true;
  std::int64_t base_width = 64;
  std::int64_t n_layers = 2;
  std::int64_t head_dim = 16;
  std::int64_t batch = 4;
  std::int64_t seq = 32;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
};

struct CoordinateCheckResult {
  std::vector<std::int64_t> widths;
  // [width][layer]: residual-stream RMS at init and after `steps` updates.
  std::vector<std::vector<double>> rms_init;
  std::vector<std::vector<double>> rms_trained;
  // Largest max/min ratio across widths over every probe.
  double max_ratio = 1.0;
};

// Trains one model per width on identical data for `steps` optimizer steps
// and records the per-layer residual RMS on a fixed probe batch.
CoordinateCheckResult coordinate_check(const CoordinateCheckOptions& options);

}  // namespace deskpt
