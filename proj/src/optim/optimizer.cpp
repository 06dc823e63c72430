// SPDX-License-Identifier: Apache-2.0

#include "deskpt/optim/optimizer.hpp"

#include <cmath>

#include "deskpt/error.hpp"

namespace deskpt {

template <Real T>
ParamPartition partition_params(const std::vector<NamedParameter<T>>& params) {
  ParamPartition out;
  for (const auto& p : params) {
    const bool vector_like = p.tensor.rank() < 2 || p.role == ParamRole::embedding ||
                             p.role == ParamRole::lm_head;
    (vector_like ? out.adamw_group : out.muon_group).push_back(p.name);
  }
  return out;
}

template ParamPartition partition_params(const std::vector<NamedParameter<float>>&);
template ParamPartition partition_params(const std::vector<NamedParameter<double>>&);

std::string_view optimizer_kind_name(OptimizerKind kind) {
  return kind == OptimizerKind::normuon ? "normuon" : "adamw";
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("optimizer config: " + what); };
  if (!(muon_lr >= 0.0) || !(adamw_lr >= 0.0)) fail("learning rates must be >= 0");
  if (!(matrix_weight_decay >= 0.0) || !(adamw_weight_decay >= 0.0)) fail("weight decay must be >= 0");
  if (!(max_grad_norm >= 0.0)) fail("max_grad_norm must be >= 0");
  if (!(normuon.momentum >= 0.0 && normuon.momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(normuon.beta2 >= 0.0 && normuon.beta2 < 1.0)) fail("normuon beta2 must be in [0, 1)");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0)) fail("adamw beta1 must be in [0, 1)");
  if (!(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) fail("adamw beta2 must be in [0, 1)");
  if (!(normuon.eps > 0.0) || !(adamw.eps > 0.0)) fail("eps must be positive");
  if (normuon.ns.steps < 1) fail("ns_steps must be >= 1");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", optimizer_kind_name(c.kind)},
       {"muon_lr", c.muon_lr},
       {"adamw_lr", c.adamw_lr},
       {"matrix_weight_decay", c.matrix_weight_decay},
       {"adamw_weight_decay", c.adamw_weight_decay},
       {"max_grad_norm", c.max_grad_norm},
       {"momentum", c.normuon.momentum},
       {"nesterov", c.normuon.nesterov},
       {"raw_gradient", c.normuon.raw_gradient},
       {"normuon_beta2", c.normuon.beta2},
       {"normuon_eps", c.normuon.eps},
       {"cautious", c.normuon.cautious},
       {"rms_match", c.normuon.rms_match},
       {"ns_steps", c.normuon.ns.steps},
       {"ns_schedule", ns_schedule_name(c.normuon.ns.schedule)},
       {"adamw_beta1", c.adamw.beta1},
       {"adamw_beta2", c.adamw.beta2},
       {"adamw_eps", c.adamw.eps}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  if (j.contains("kind")) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "normuon") {
      c.kind = OptimizerKind::normuon;
    } else if (kind == "adamw") {
      c.kind = OptimizerKind::adamw;
    } else {
      throw ConfigError("unknown optimizer kind '" + kind + "'");
    }
  }
  c.muon_lr = j.value("muon_lr", c.muon_lr);
  c.adamw_lr = j.value("adamw_lr", c.adamw_lr);
  c.matrix_weight_decay = j.value("matrix_weight_decay", c.matrix_weight_decay);
  c.adamw_weight_decay = j.value("adamw_weight_decay", c.adamw_weight_decay);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.normuon.momentum = j.value("momentum", c.normuon.momentum);
  c.normuon.nesterov = j.value("nesterov", c.normuon.nesterov);
  c.normuon.raw_gradient = j.value("raw_gradient", c.normuon.raw_gradient);
  c.normuon.beta2 = j.value("normuon_beta2", c.normuon.beta2);
  c.normuon.eps = j.value("normuon_eps", c.normuon.eps);
  c.normuon.cautious = j.value("cautious", c.normuon.cautious);
  c.normuon.rms_match = j.value("rms_match", c.normuon.rms_match);
  c.normuon.ns.steps = j.value("ns_steps", c.normuon.ns.steps);
  if (j.contains("ns_schedule")) {
    c.normuon.ns.schedule = parse_ns_schedule(j.at("ns_schedule").get<std::string>());
  }
  c.adamw.beta1 = j.value("adamw_beta1", c.adamw.beta1);
  c.adamw.beta2 = j.value("adamw_beta2", c.adamw.beta2);
  c.adamw.eps = j.value("adamw_eps", c.adamw.eps);
}

template <Real T>
Optimizer<T>::Optimizer(const Transformer<T>& model, OptimizerConfig config,
                        std::map<std::string, double> lr_multipliers)
    : config_(std::move(config)),
      partition_(partition_params(model.parameters())),
      lr_multipliers_(std::move(lr_multipliers)) {
  config_.validate();
  for (const auto& name : partition_.muon_group) {
    if (config_.kind == OptimizerKind::normuon) {
      muon_state_.emplace(name, NorMuonState<T>{});
    } else {
      adam_state_.emplace(name, AdamWState<T>{});
      decays_[name] = true;
    }
  }
  for (const auto& name : partition_.adamw_group) {
    adam_state_.emplace(name, AdamWState<T>{});
    decays_[name] = false;
  }
}

template <Real T>
bool Optimizer<T>::uses_muon(const std::string& name) const {
  return muon_state_.count(name) != 0;
}

template <Real T>
StepStats Optimizer<T>::step(const Transformer<T>& model, double lr_muon, double lr_adamw) {
  StepStats stats;
  double sq = 0.0;
  for (const auto& p : model.parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("optimizer: non-finite gradient norm");
  const double clip = config_.max_grad_norm > 0.0 && stats.grad_norm > config_.max_grad_norm
                          ? config_.max_grad_norm / stats.grad_norm
                          : 1.0;

  for (const auto& p : model.parameters()) {
    Tensor<T> grad = p.tensor.grad_tensor();
    if (clip != 1.0) {
      for (auto& g : grad.mutable_data()) g = static_cast<T>(g * clip);
    }
    auto it = lr_multipliers_.find(p.name);
    const double mult = it == lr_multipliers_.end() ? 1.0 : it->second;
    if (uses_muon(p.name)) {
      normuon_step(p.tensor, grad, muon_state_.at(p.name), lr_muon * mult,
                   config_.matrix_weight_decay, config_.normuon);
    } else {
      const double wd = decays_.at(p.name) ? config_.matrix_weight_decay : config_.adamw_weight_decay;
      adamw_step(p.tensor, grad, adam_state_.at(p.name), lr_adamw * mult, wd, config_.adamw);
    }
  }
  ++steps_;
  return stats;
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>>> Optimizer<T>::state_tensors() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& [name, st] : muon_state_) {
    if (st.momentum.defined()) out.emplace_back(name + ".momentum", st.momentum);
    if (st.row_v.defined()) out.emplace_back(name + ".row_v", st.row_v);
  }
  for (const auto& [name, st] : adam_state_) {
    if (st.m.defined()) out.emplace_back(name + ".m", st.m);
    if (st.v.defined()) out.emplace_back(name + ".v", st.v);
  }
  return out;
}

template <Real T>
void Optimizer<T>::load_state(const std::map<std::string, Tensor<T>>& tensors, std::int64_t steps) {
  auto take = [&](const std::string& key) -> Tensor<T> {
    auto it = tensors.find(key);
    return it == tensors.end() ? Tensor<T>{} : it->second.clone();
  };
  for (auto& [name, st] : muon_state_) {
    st.momentum = take(name + ".momentum");
    st.row_v = take(name + ".row_v");
    st.step = steps;
  }
  for (auto& [name, st] : adam_state_) {
    st.m = take(name + ".m");
    st.v = take(name + ".v");
    st.step = steps;
  }
  steps_ = steps;
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace deskpt
