// SPDX-License-Identifier: Apache-2.0

#include "deskpt/trainer/ema.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deskpt/error.hpp"

namespace deskpt {

EmaMode parse_ema_mode(std::string_view name) {
  if (name == "recurrence") return EmaMode::recurrence;
  if (name == "uniform") return EmaMode::uniform;
  throw ConfigError("unknown EMA mode '" + std::string(name) + "'");
}

std::vector<double> ema_weights(std::size_t count, double beta, EmaMode mode) {
  if (count == 0) throw Error("ema_weights: no checkpoints");
  std::vector<double> w(count);
  if (mode == EmaMode::uniform) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(count));
    return w;
  }
  // c_1 survives count - 1 decays; c_i (i >= 2) enters with 1 - beta.
  w[0] = std::pow(beta, static_cast<double>(count - 1));
  for (std::size_t i = 1; i < count; ++i) w[i] = (1.0 - beta) * std::pow(beta, static_cast<double>(count - 1 - i));
  return w;
}

Checkpoint posthoc_ema(const std::vector<Checkpoint>& ckpts, double beta, EmaMode mode) {
  if (ckpts.empty()) throw Error("posthoc_ema: no checkpoints");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("EMA beta must be in [0, 1]");
  const auto& first = ckpts.front().model;
  for (std::size_t i = 1; i < ckpts.size(); ++i) {
    const auto& m = ckpts[i].model;
    if (m.size() != first.size()) throw ShapeError("posthoc_ema: checkpoints hold different tensor sets");
    for (const auto& [name, t] : first) {
      auto it = m.find(name);
      if (it == m.end()) throw ShapeError("posthoc_ema: tensor " + name + " missing from a checkpoint");
      if (it->second.shape != t.shape) throw ShapeError("posthoc_ema: shape mismatch for " + name);
    }
  }

  Checkpoint out;
  out.meta = ckpts.back().meta;
  out.model = first;
  if (mode == EmaMode::recurrence) {
    for (std::size_t i = 1; i < ckpts.size(); ++i) {
      for (auto& [name, e] : out.model) {
        const auto& c = ckpts[i].model.at(name).values;
        for (std::size_t k = 0; k < e.values.size(); ++k) e.values[k] = beta * e.values[k] + (1.0 - beta) * c[k];
      }
    }
  } else {
    const double inv = 1.0 / static_cast<double>(ckpts.size());
    for (auto& [name, e] : out.model) {
      for (std::size_t k = 0; k < e.values.size(); ++k) {
        double sum = 0.0;
        for (const auto& ck : ckpts) sum += ck.model.at(name).values[k];
        e.values[k] = sum * inv;
      }
    }
  }
  for (auto& [name, e] : out.model) e.dtype = ckpts.back().model.at(name).dtype;
  return out;
}

Checkpoint posthoc_ema_dir(const std::filesystem::path& dir, double beta, std::size_t last_n, EmaMode mode) {
  auto paths = list_checkpoints(dir);
  if (paths.empty()) throw Error("no checkpoints in " + dir.string());
  if (last_n > 0 && paths.size() > last_n) paths.erase(paths.begin(), paths.end() - static_cast<std::ptrdiff_t>(last_n));
  std::vector<Checkpoint> ckpts;
  for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
  return posthoc_ema(ckpts, beta, mode);
}

}  // namespace deskpt
