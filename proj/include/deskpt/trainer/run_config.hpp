// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deskpt/data/mixture.hpp"
#include "deskpt/model/config.hpp"
#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/mup.hpp"
#include "deskpt/optim/optimizer.hpp"
#include "deskpt/schedule/schedule.hpp"
#include "json.hpp"

namespace deskpt {

// One training stage. Schedules produce a multiplier (peak_lr 1 by default)
// that scales each group's peak rate; total_steps counts optimizer updates
// (iterations / grad_accum) and is filled in when left at 0.
struct StagePlan {
  std::string name = "stage";
  std::int64_t iterations = 100;
  std::int64_t batch = 8;
  std::int64_t seq = 64;
  std::int64_t grad_accum = 2;
  ScheduleSpec muon_schedule;
  ScheduleSpec adamw_schedule;
  std::optional<double> muon_lr;   // overrides OptimizerConfig::muon_lr
  std::optional<double> adamw_lr;  // overrides OptimizerConfig::adamw_lr
  MixtureSpec mixture;
  // In iterations; 0 saves only at the end of the stage.
  std::int64_t checkpoint_every = 0;

  std::int64_t updates() const { return iterations / grad_accum; }
  std::int64_t tokens_per_iteration() const { return batch * seq; }
  void validate() const;
};

void to_json(nlohmann::json& j, const StagePlan& s);
void from_json(const nlohmann::json& j, StagePlan& s);

struct RunConfig {
  ModelConfig model;
  InitOptions init;
  MupSettings mup;
  OptimizerConfig optimizer;
  double z_loss = kDefaultZLoss;
  std::uint64_t seed = 0;
  // Drives the data order when set; otherwise `seed` drives both init and
  // data. Ablations pin it so that seeds differ only in init.
  std::optional<std::uint64_t> data_seed;
  std::string precision = "float";  // or "double"
  std::vector<StagePlan> stages;
  std::filesystem::path train_data;  // directory of .shard files
  std::filesystem::path out_dir;
  std::int64_t log_every = 10;
  std::size_t prefetch = 4;
  // Mean train CE over this many final iterations is the run's final loss.
  std::int64_t final_loss_window = 20;

  void validate() const;
  // FNV-1a over the canonical JSON form.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Reads a JSON config; relative paths resolve against the file's directory.
// Any parse or validation problem is a ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

// RFC 7386 merge patch, used by ablation grids.
nlohmann::json merge_patch(nlohmann::json base, const nlohmann::json& patch);

}  // namespace deskpt
