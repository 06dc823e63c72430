// SPDX-License-Identifier: Apache-2.0

#include "deskpt/trainer/run_config.hpp"

#include <cstdio>
#include <fstream>

#include "deskpt/error.hpp"

namespace deskpt {

void StagePlan::validate() const {
  auto fail = [this](const std::string& what) { throw ConfigError("stage '" + name + "': " + what); };
  if (iterations <= 0) fail("iterations must be > 0");
  if (grad_accum < 1) fail("grad_accum must be >= 1");
  if (batch < 1 || seq < 1) fail("batch and seq must be >= 1");
  if (iterations % grad_accum != 0) fail("iterations must be a multiple of grad_accum");
  if (checkpoint_every < 0 || checkpoint_every % grad_accum != 0) {
    fail("checkpoint_every must be a nonnegative multiple of grad_accum");
  }
  for (const auto* s : {&muon_schedule, &adamw_schedule}) {
    if (s->total_steps != updates()) fail("schedule total_steps must equal iterations / grad_accum");
    s->validate();
  }
  if (muon_lr && !(*muon_lr >= 0.0)) fail("muon_lr must be >= 0");
  if (adamw_lr && !(*adamw_lr >= 0.0)) fail("adamw_lr must be >= 0");
  mixture.validate();
}

void to_json(nlohmann::json& j, const StagePlan& s) {
  j = {{"name", s.name},
       {"iterations", s.iterations},
       {"batch", s.batch},
       {"seq", s.seq},
       {"grad_accum", s.grad_accum},
       {"muon_schedule", s.muon_schedule},
       {"adamw_schedule", s.adamw_schedule},
       {"mixture", s.mixture},
       {"checkpoint_every", s.checkpoint_every}};
  if (s.muon_lr) j["muon_lr"] = *s.muon_lr;
  if (s.adamw_lr) j["adamw_lr"] = *s.adamw_lr;
}

void from_json(const nlohmann::json& j, StagePlan& s) {
  s.name = j.value("name", s.name);
  s.iterations = j.value("iterations", s.iterations);
  s.batch = j.value("batch", s.batch);
  s.seq = j.value("seq", s.seq);
  s.grad_accum = j.value("grad_accum", s.grad_accum);
  s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  if (j.contains("muon_lr")) s.muon_lr = j["muon_lr"].get<double>();
  if (j.contains("adamw_lr")) s.adamw_lr = j["adamw_lr"].get<double>();
  s.mixture = j.at("mixture").get<MixtureSpec>();
  const std::int64_t updates = s.grad_accum > 0 ? s.iterations / s.grad_accum : 0;
  auto read_schedule = [&](const char* key, ScheduleSpec& out) {
    nlohmann::json spec = j.value("schedule", nlohmann::json::object());
    if (j.contains(key)) spec = merge_patch(spec, j.at(key));
    out = spec.get<ScheduleSpec>();
    if (!spec.contains("total_steps")) out.total_steps = updates;
  };
  read_schedule("muon_schedule", s.muon_schedule);
  read_schedule("adamw_schedule", s.adamw_schedule);
}

void RunConfig::validate() const {
  model.validate();
  mup.validate();
  optimizer.validate();
  if (!(z_loss >= 0.0)) throw ConfigError("z_loss must be >= 0");
  if (precision != "float" && precision != "double") throw ConfigError("precision must be 'float' or 'double'");
  if (stages.empty()) throw ConfigError("run needs at least one stage");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (final_loss_window < 1) throw ConfigError("final_loss_window must be >= 1");
  for (const auto& s : stages) {
    s.validate();
    if (s.seq > model.max_context) throw ConfigError("stage '" + s.name + "': seq exceeds max_context");
  }
}

std::string RunConfig::hash() const {
  const std::string text = nlohmann::json(*this).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"init",
        {{"embed_std", c.init.embed_std},
         {"hidden_std_mult", c.init.hidden_std_mult},
         {"lm_head_std_mult", c.init.lm_head_std_mult}}},
       {"mup", c.mup},
       {"optimizer", c.optimizer},
       {"z_loss", c.z_loss},
       {"seed", c.seed},
       {"precision", c.precision},
       {"stages", c.stages},
       {"train_data", c.train_data.string()},
       {"out_dir", c.out_dir.string()},
       {"log_every", c.log_every},
       {"prefetch", c.prefetch},
       {"final_loss_window", c.final_loss_window}};
  if (c.data_seed) j["data_seed"] = *c.data_seed;
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("init")) {
    const auto& i = j.at("init");
    c.init.embed_std = i.value("embed_std", c.init.embed_std);
    c.init.hidden_std_mult = i.value("hidden_std_mult", c.init.hidden_std_mult);
    c.init.lm_head_std_mult = i.value("lm_head_std_mult", c.init.lm_head_std_mult);
  }
  if (j.contains("mup")) c.mup = j.at("mup").get<MupSettings>();
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.z_loss = j.value("z_loss", c.z_loss);
  c.seed = j.value("seed", c.seed);
  if (j.contains("data_seed") && !j["data_seed"].is_null()) c.data_seed = j["data_seed"].get<std::uint64_t>();
  c.precision = j.value("precision", c.precision);
  c.stages = j.at("stages").get<std::vector<StagePlan>>();
  c.train_data = j.value("train_data", c.train_data.string());
  c.out_dir = j.value("out_dir", c.out_dir.string());
  c.log_every = j.value("log_every", c.log_every);
  c.prefetch = j.value("prefetch", c.prefetch);
  c.final_loss_window = j.value("final_loss_window", c.final_loss_window);
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!base_dir.empty()) {
    if (!c.train_data.empty() && c.train_data.is_relative()) c.train_data = (base_dir / c.train_data).lexically_normal();
    if (!c.out_dir.empty() && c.out_dir.is_relative()) c.out_dir = (base_dir / c.out_dir).lexically_normal();
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

nlohmann::json merge_patch(nlohmann::json base, const nlohmann::json& patch) {
  base.merge_patch(patch);
  return base;
}

}  // namespace deskpt
