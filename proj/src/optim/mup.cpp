// SPDX-License-Identifier: Apache-2.0

#include "deskpt/optim/mup.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "deskpt/error.hpp"
#include "deskpt/tensor/graph.hpp"

namespace deskpt {

void MupSettings::validate() const {
  if (base_width < 1 || width < 1) throw ConfigError("mup: widths must be positive");
  if (!(hidden_init_mult > 0.0 && hidden_lr_mult > 0.0 && embed_lr_mult > 0.0 && output_mult > 0.0)) {
    throw ConfigError("mup: multipliers must be positive");
  }
}

void to_json(nlohmann::json& j, const MupSettings& s) {
  j = {{"enabled", s.enabled},
       {"base_width", s.base_width},
       {"width", s.width},
       {"hidden_init_mult", s.hidden_init_mult},
       {"hidden_lr_mult", s.hidden_lr_mult},
       {"embed_lr_mult", s.embed_lr_mult},
       {"output_mult", s.output_mult}};
}

void from_json(const nlohmann::json& j, MupSettings& s) {
  s.enabled = j.value("enabled", s.enabled);
  s.base_width = j.value("base_width", s.base_width);
  s.width = j.value("width", s.width);
  s.hidden_init_mult = j.value("hidden_init_mult", s.hidden_init_mult);
  s.hidden_lr_mult = j.value("hidden_lr_mult", s.hidden_lr_mult);
  s.embed_lr_mult = j.value("embed_lr_mult", s.embed_lr_mult);
  s.output_mult = j.value("output_mult", s.output_mult);
}

MupPlan mup_apply(const ModelConfig& config, const MupSettings& settings) {
  MupPlan plan;
  if (!settings.enabled) return plan;
  settings.validate();
  const double width = static_cast<double>(settings.width > 0 ? settings.width : config.d_model);
  const double ratio = static_cast<double>(settings.base_width) / width;
  plan.init.hidden_std_mult = settings.hidden_init_mult;
  plan.hidden_lr_mult = settings.hidden_lr_mult * ratio;
  plan.embed_lr_mult = settings.embed_lr_mult;
  plan.output_scale = settings.output_mult * ratio;
  return plan;
}

template <Real T>
std::map<std::string, double> mup_lr_multipliers(const Transformer<T>& model, const MupPlan& plan) {
  std::map<std::string, double> out;
  for (const auto& p : model.parameters()) {
    switch (p.role) {
      case ParamRole::attn_proj:
      case ParamRole::gate_proj:
      case ParamRole::ffn_proj: out[p.name] = plan.hidden_lr_mult; break;
      case ParamRole::embedding: out[p.name] = plan.embed_lr_mult; break;
      default: out[p.name] = 1.0; break;
    }
  }
  return out;
}

template std::map<std::string, double> mup_lr_multipliers(const Transformer<float>&, const MupPlan&);
template std::map<std::string, double> mup_lr_multipliers(const Transformer<double>&, const MupPlan&);

namespace {

std::vector<double> residual_rms(const Transformer<float>& model, const std::vector<std::int32_t>& tokens,
                                 std::int64_t batch, std::int64_t seq) {
  ForwardTrace<float> trace;
  {
    NoGradScope<float> no_grad;
    model.forward(tokens, batch, seq, &trace);
  }
  std::vector<double> out;
  for (const auto& r : trace.residual) {
    double sq = 0.0;
    for (float v : r.data()) sq += static_cast<double>(v) * v;
    out.push_back(std::sqrt(sq / static_cast<double>(r.numel())));
  }
  return out;
}

}  // namespace

CoordinateCheckResult coordinate_check(const CoordinateCheckOptions& options) {
  if (options.widths.empty()) throw ConfigError("coordinate_check: no widths");
  CoordinateCheckResult result;
  result.widths = options.widths;

  constexpr std::int32_t kVocab = 258;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::int32_t> byte(0, 255);
  const auto n = static_cast<std::size_t>(options.batch * (options.seq + 1));
  std::vector<std::vector<std::int32_t>> batches(static_cast<std::size_t>(options.steps) + 1);
  for (auto& b : batches) {
    b.resize(n);
    for (auto& t : b) t = byte(rng);
  }
  auto split = [&](const std::vector<std::int32_t>& b, std::vector<std::int32_t>& in,
                   std::vector<std::int32_t>& tgt) {
    in.clear();
    tgt.clear();
    for (std::int64_t r = 0; r < options.batch; ++r) {
      for (std::int64_t t = 0; t < options.seq; ++t) {
        in.push_back(b[static_cast<std::size_t>(r * (options.seq + 1) + t)]);
        tgt.push_back(b[static_cast<std::size_t>(r * (options.seq + 1) + t + 1)]);
      }
    }
  };
  std::vector<std::int32_t> probe_in, probe_tgt;
  split(batches.back(), probe_in, probe_tgt);

  for (std::int64_t width : options.widths) {
    ModelConfig mc;
    mc.d_model = width;
    mc.head_dim = options.head_dim;
    mc.n_heads = width / options.head_dim;
    mc.n_kv_heads = mc.n_heads;
    mc.n_layers = options.n_layers;
    mc.ffn_dim = width * 8 / 3;
    mc.vocab_size = kVocab;
    mc.max_context = options.seq;
    MupSettings mup{options.mup, options.base_width, width};
    MupPlan plan = mup_apply(mc, mup);
    mc.output_scale = plan.output_scale;
    Transformer<float> model(mc, options.seed, plan.init);
    Optimizer<float> opt(model, options.optimizer, mup_lr_multipliers(model, plan));

    result.rms_init.push_back(residual_rms(model, probe_in, options.batch, options.seq));
    std::vector<std::int32_t> in, tgt;
    for (int s = 0; s < options.steps; ++s) {
      split(batches[static_cast<std::size_t>(s)], in, tgt);
      model.zero_grad();
      Graph<float> graph;
      {
        GraphScope<float> scope(graph);
        auto loss = loss_ce_zloss<float>(model.forward(in, options.batch, options.seq), tgt, {});
        graph.backward(loss.total);
      }
      opt.step(model, options.optimizer.muon_lr, options.optimizer.adamw_lr);
    }
    result.rms_trained.push_back(residual_rms(model, probe_in, options.batch, options.seq));
  }

  auto worst_ratio = [&](const std::vector<std::vector<double>>& table) {
    double worst = 1.0;
    for (std::size_t layer = 0; layer < table.front().size(); ++layer) {
      double lo = INFINITY, hi = 0.0;
      for (const auto& row : table) {
        lo = std::min(lo, row[layer]);
        hi = std::max(hi, row[layer]);
      }
      worst = std::max(worst, hi / lo);
    }
    return worst;
  };
  result.max_ratio = std::max(worst_ratio(result.rms_init), worst_ratio(result.rms_trained));
  return result;
}

}  // namespace deskpt
