// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/normuon.hpp"
#include "json.hpp"

namespace deskpt {

struct ParamPartition {
  std::vector<std::string> muon_group;
  std::vector<std::string> adamw_group;
};

// Embeddings, lm_head and every tensor of rank < 2 go to AdamW; the remaining
// matrices go to NorMuon.
template <Real T>
ParamPartition partition_params(const std::vector<NamedParameter<T>>& params);

enum class OptimizerKind {
  normuon,  // NorMuon on matrices, AdamW on the rest
  adamw,    // AdamW everywhere
};

std::string_view optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::normuon;
  double muon_lr = 0.0235;
  double adamw_lr = 0.007;
  // Decay on hidden matrices (NorMuon group, or the same matrices under
  // plain AdamW); the AdamW vector group uses adamw_weight_decay.
  double matrix_weight_decay = 0.1;
  double adamw_weight_decay = 0.0;
  // Global gradient-norm clip; 0 disables.
  double max_grad_norm = 0.0;
  NorMuonOptions normuon;
  AdamWOptions adamw;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct StepStats {
  double grad_norm = 0.0;  // before clipping
};

template <Real T>
class Optimizer {
 public:
  // lr_multipliers scales the per-step learning rate of individual parameters
  // (used for width-dependent scaling); missing names use 1.
  Optimizer(const Transformer<T>& model, OptimizerConfig config,
            std::map<std::string, double> lr_multipliers = {});

  // Reads the accumulated gradients of `model` and updates its parameters.
  // lr_muon and lr_adamw already include any schedule factor. Under
  // OptimizerKind::adamw every parameter uses lr_adamw.
  StepStats step(const Transformer<T>& model, double lr_muon, double lr_adamw);

  const OptimizerConfig& config() const { return config_; }
  const ParamPartition& partition() const { return partition_; }
  std::int64_t steps() const { return steps_; }

  // Named state tensors: <param>.momentum, <param>.row_v, <param>.m, <param>.v.
  std::vector<std::pair<std::string, Tensor<T>>> state_tensors() const;
  void load_state(const std::map<std::string, Tensor<T>>& tensors, std::int64_t steps);

 private:
  bool uses_muon(const std::string& name) const;

  OptimizerConfig config_;
  ParamPartition partition_;
  std::map<std::string, double> lr_multipliers_;
  std::map<std::string, NorMuonState<T>> muon_state_;
  std::map<std::string, AdamWState<T>> adam_state_;
  std::map<std::string, bool> decays_;  // AdamW entries that get matrix decay
  std::int64_t steps_ = 0;
};

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace deskpt
