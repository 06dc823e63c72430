// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "deskpt/trainer/run_config.hpp"
#include "deskpt/trainer/trainer.hpp"
#include "json.hpp"

namespace deskpt {

// One grid row: a merge patch over the base run config, plus a patch applied
// to every stage (arrays do not merge, so stage edits go here).
struct AblationRow {
  std::string name;
  nlohmann::json patch = nlohmann::json::object();
  nlohmann::json stage_patch = nlohmann::json::object();
};

struct AblationGrid {
  nlohmann::json base;
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds{0};
  std::string baseline;  // row name; defaults to the first row
  std::filesystem::path out_dir;
  std::filesystem::path base_dir;  // resolves relative paths in `base`
};

// JSON: {"base": {...} | "base_config": "run.json", "rows": [...] |
// "preset": "arch" | "optimizer" | "schedule", "seeds": [...],
// "baseline": "...", "out_dir": "..."}.
AblationGrid load_ablation_grid(const std::filesystem::path& path);

// Baseline, one row per intervention, then everything on (AdamW throughout).
std::vector<AblationRow> arch_grid_rows();
// All interventions on; AdamW, NorMuon without and with cautious decay.
std::vector<AblationRow> optimizer_grid_rows();
// Cosine against WSD with 0, 10, 20 and 30% decay.
std::vector<AblationRow> schedule_grid_rows();

RunConfig ablation_member_config(const AblationGrid& grid, const AblationRow& row, std::uint64_t seed);

struct AblationRowResult {
  std::string name;
  std::vector<double> losses;  // per seed, failed members omitted
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across seeds
  double delta = 0.0;   // mean - baseline mean
  double delta_pct = 0.0;
  bool failed = false;
  std::string error;
};

struct AblationReport {
  std::string baseline;
  std::vector<AblationRowResult> rows;

  const AblationRowResult& row(const std::string& name) const;
  std::string markdown() const;
};

void to_json(nlohmann::json& j, const AblationReport& r);

// Called after each member run with its config and result.
using AblationObserver = std::function<void(const AblationRow&, std::uint64_t seed, const RunConfig&,
                                            const TrainResult&)>;

// Trains every row at every seed in this process. A member that throws marks
// its row failed; the grid continues. Writes report.md and report.json to
// out_dir when set.
AblationReport run_ablation(const AblationGrid& grid, const AblationObserver& observer = {});

}  // namespace deskpt
