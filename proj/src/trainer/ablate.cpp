// SPDX-License-Identifier: Apache-2.0

#include "deskpt/trainer/ablate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "deskpt/error.hpp"

namespace deskpt {

namespace {

nlohmann::json toggles(bool qk, bool gate, bool vr, bool ln) {
  return {{"model", {{"toggles", {{"qk_norm", qk}, {"gating", gate}, {"value_residual", vr}, {"ln_scaling", ln}}}}}};
}

nlohmann::json with_optimizer(nlohmann::json patch, const nlohmann::json& optim) {
  patch["optimizer"] = optim;
  return patch;
}

}  // namespace

std::vector<AblationRow> arch_grid_rows() {
  const nlohmann::json adamw = {{"kind", "adamw"}};
  return {
      {"baseline", with_optimizer(toggles(false, false, false, false), adamw), nlohmann::json::object()},
      {"+qk_norm", with_optimizer(toggles(true, false, false, false), adamw), nlohmann::json::object()},
      {"+gating", with_optimizer(toggles(false, true, false, false), adamw), nlohmann::json::object()},
      {"+value_residual", with_optimizer(toggles(false, false, true, false), adamw), nlohmann::json::object()},
      {"+ln_scaling", with_optimizer(toggles(false, false, false, true), adamw), nlohmann::json::object()},
      {"all", with_optimizer(toggles(true, true, true, true), adamw), nlohmann::json::object()},
  };
}

std::vector<AblationRow> optimizer_grid_rows() {
  const auto all = toggles(true, true, true, true);
  return {
      {"all-arch+AdamW", with_optimizer(all, {{"kind", "adamw"}}), nlohmann::json::object()},
      {"+NorMuon", with_optimizer(all, {{"kind", "normuon"}, {"cautious", false}}), nlohmann::json::object()},
      {"+CWD", with_optimizer(all, {{"kind", "normuon"}, {"cautious", true}}), nlohmann::json::object()},
  };
}

std::vector<AblationRow> schedule_grid_rows() {
  // Both groups are patched; a stage's per-group keys take precedence over
  // its shared "schedule" entry.
  auto both = [](const nlohmann::json& spec) { return nlohmann::json{{"muon_schedule", spec}, {"adamw_schedule", spec}}; };
  std::vector<AblationRow> rows{{"cosine", nlohmann::json::object(), both({{"kind", "cosine"}})}};
  for (int pct : {0, 10, 20, 30}) {
    const std::string name = pct == 0 ? "WSD stable-only" : "WSD " + std::to_string(pct) + "%";
    rows.push_back({name, nlohmann::json::object(), both({{"kind", "wsd"}, {"decay_fraction", pct / 100.0}})});
  }
  return rows;
}

AblationGrid load_ablation_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid " + path.string());
  AblationGrid grid;
  grid.base_dir = std::filesystem::absolute(path).parent_path();
  try {
    const auto j = nlohmann::json::parse(in, nullptr, true, true);
    if (j.contains("base_config")) {
      const auto base_path = grid.base_dir / j.at("base_config").get<std::string>();
      std::ifstream base_in(base_path);
      if (!base_in) throw ConfigError("cannot read base config " + base_path.string());
      grid.base = nlohmann::json::parse(base_in, nullptr, true, true);
      grid.base_dir = std::filesystem::absolute(base_path).parent_path();
    } else {
      grid.base = j.at("base");
    }
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "arch") {
        grid.rows = arch_grid_rows();
      } else if (preset == "optimizer") {
        grid.rows = optimizer_grid_rows();
      } else if (preset == "schedule") {
        grid.rows = schedule_grid_rows();
      } else {
        throw ConfigError("unknown grid preset '" + preset + "'");
      }
    }
    if (j.contains("rows")) {
      for (const auto& r : j.at("rows")) {
        grid.rows.push_back({r.at("name").get<std::string>(), r.value("patch", nlohmann::json::object()),
                             r.value("stage_patch", nlohmann::json::object())});
      }
    }
    if (j.contains("seeds")) grid.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    grid.baseline = j.value("baseline", std::string{});
    if (j.contains("out_dir")) grid.out_dir = std::filesystem::absolute(path).parent_path() / j.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("grid " + path.string() + ": " + e.what());
  }
  if (grid.rows.empty()) throw ConfigError("grid has no rows");
  if (grid.seeds.empty()) throw ConfigError("grid has no seeds");
  if (grid.baseline.empty()) grid.baseline = grid.rows.front().name;
  return grid;
}

RunConfig ablation_member_config(const AblationGrid& grid, const AblationRow& row, std::uint64_t seed) {
  nlohmann::json j = merge_patch(grid.base, row.patch);
  if (!row.stage_patch.empty() && j.contains("stages")) {
    for (auto& stage : j["stages"]) stage = merge_patch(stage, row.stage_patch);
  }
  j["seed"] = seed;
  if (!grid.out_dir.empty()) {
    std::string dir = row.name;
    for (auto& c : dir) {
      if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    }
    j["out_dir"] = (grid.out_dir / dir / ("seed_" + std::to_string(seed))).string();
  } else {
    j["out_dir"] = "";
  }
  return run_config_from_json(j, grid.base_dir);
}

const AblationRowResult& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw Error("ablation report has no row '" + name + "'");
}

std::string AblationReport::markdown() const {
  std::ostringstream out;
  out << "| Configuration | Final train loss | Seed sd | Delta | Delta % |\n";
  out << "|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.failed) {
      out << "| " << r.name << " | failed | | | |\n";
      continue;
    }
    if (r.name == baseline) {
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | - | - |\n", r.name.c_str(), r.mean, r.stddev);
    } else {
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | %+.4f | %+.2f%% |\n", r.name.c_str(), r.mean, r.stddev,
                    r.delta, r.delta_pct);
    }
    out << buf;
  }
  return out.str();
}

void to_json(nlohmann::json& j, const AblationReport& r) {
  j = {{"baseline", r.baseline}, {"rows", nlohmann::json::array()}};
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"name", row.name},
                         {"losses", row.losses},
                         {"mean", row.mean},
                         {"stddev", row.stddev},
                         {"delta", row.delta},
                         {"delta_pct", row.delta_pct},
                         {"failed", row.failed},
                         {"error", row.error}});
  }
}

AblationReport run_ablation(const AblationGrid& grid, const AblationObserver& observer) {
  AblationReport report;
  report.baseline = grid.baseline.empty() ? grid.rows.front().name : grid.baseline;
  for (const auto& row : grid.rows) {
    AblationRowResult res;
    res.name = row.name;
    for (auto seed : grid.seeds) {
      try {
        const RunConfig cfg = ablation_member_config(grid, row, seed);
        const TrainResult tr = train_from_config(cfg);
        res.losses.push_back(tr.final_loss);
        if (observer) observer(row, seed, cfg, tr);
      } catch (const std::exception& e) {
        res.failed = true;
        res.error = e.what();
      }
    }
    if (!res.losses.empty()) {
      double sum = 0.0;
      for (double l : res.losses) sum += l;
      res.mean = sum / static_cast<double>(res.losses.size());
      double sq = 0.0;
      for (double l : res.losses) sq += (l - res.mean) * (l - res.mean);
      res.stddev = res.losses.size() > 1 ? std::sqrt(sq / static_cast<double>(res.losses.size() - 1)) : 0.0;
    }
    report.rows.push_back(std::move(res));
  }
  const auto base_it = std::find_if(report.rows.begin(), report.rows.end(),
                                    [&](const AblationRowResult& r) { return r.name == report.baseline; });
  if (base_it != report.rows.end() && !base_it->failed) {
    const double base = base_it->mean;
    for (auto& r : report.rows) {
      if (r.failed) continue;
      r.delta = r.mean - base;
      r.delta_pct = base != 0.0 ? 100.0 * r.delta / base : 0.0;
    }
  }
  if (!grid.out_dir.empty()) {
    std::filesystem::create_directories(grid.out_dir);
    std::ofstream(grid.out_dir / "report.md") << report.markdown();
    std::ofstream(grid.out_dir / "report.json") << nlohmann::json(report).dump(2) << '\n';
  }
  return report;
}

}  // namespace deskpt
