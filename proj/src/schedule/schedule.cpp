// SPDX-License-Identifier: Apache-2.0

#include "deskpt/schedule/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "deskpt/error.hpp"

namespace deskpt {

std::string_view schedule_kind_name(ScheduleKind kind) {
  return kind == ScheduleKind::cosine ? "cosine" : "wsd";
}

void ScheduleSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("schedule: " + what); };
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps >= total_steps) fail("need 0 <= warmup_steps < total_steps");
  if (!(min_ratio >= 0.0 && min_ratio <= 1.0)) fail("min_ratio must be in [0, 1]");
  if (!(peak_lr >= 0.0)) fail("peak_lr must be >= 0");
  if (kind == ScheduleKind::wsd) {
    if (!(decay_fraction >= 0.0 && decay_fraction < 1.0)) fail("decay_fraction must be in [0, 1)");
    if (!(stable_fraction_of_peak > 0.0 && stable_fraction_of_peak <= 1.0)) {
      fail("stable_fraction_of_peak must be in (0, 1]");
    }
    if (decay_start() < warmup_steps) fail("decay interval overlaps warmup");
  }
}

std::int64_t ScheduleSpec::decay_start() const {
  const auto decay_steps =
      static_cast<std::int64_t>(std::llround(decay_fraction * static_cast<double>(total_steps)));
  return total_steps - decay_steps;
}

void to_json(nlohmann::json& j, const ScheduleSpec& s) {
  j = {{"kind", schedule_kind_name(s.kind)},
       {"peak_lr", s.peak_lr},
       {"warmup_steps", s.warmup_steps},
       {"total_steps", s.total_steps},
       {"min_ratio", s.min_ratio},
       {"stable_fraction_of_peak", s.stable_fraction_of_peak},
       {"decay_fraction", s.decay_fraction}};
}

void from_json(const nlohmann::json& j, ScheduleSpec& s) {
  if (j.contains("kind")) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "cosine") {
      s.kind = ScheduleKind::cosine;
    } else if (kind == "wsd") {
      s.kind = ScheduleKind::wsd;
    } else {
      throw ConfigError("unknown schedule kind '" + kind + "'");
    }
  }
  s.peak_lr = j.value("peak_lr", s.peak_lr);
  s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
  s.total_steps = j.value("total_steps", s.total_steps);
  s.min_ratio = j.value("min_ratio", s.min_ratio);
  s.stable_fraction_of_peak = j.value("stable_fraction_of_peak", s.stable_fraction_of_peak);
  s.decay_fraction = j.value("decay_fraction", s.decay_fraction);
}

namespace {

void check_step(std::int64_t step, const ScheduleSpec& spec) {
  if (step < 0 || step > spec.total_steps) {
    throw Error("schedule step " + std::to_string(step) + " outside [0, " +
                std::to_string(spec.total_steps) + "]");
  }
}

}  // namespace

double cosine_lr(std::int64_t step, const ScheduleSpec& spec) {
  check_step(step, spec);
  if (step < spec.warmup_steps) {
    return spec.peak_lr * static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
  }
  const double tau = static_cast<double>(step - spec.warmup_steps) /
                     static_cast<double>(spec.total_steps - spec.warmup_steps);
  return spec.peak_lr *
         (spec.min_ratio + (1.0 - spec.min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * tau)));
}

double wsd_lr(std::int64_t step, const ScheduleSpec& spec) {
  check_step(step, spec);
  const double stable = spec.stable_fraction_of_peak * spec.peak_lr;
  if (step < spec.warmup_steps) {
    return stable * static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
  }
  const std::int64_t start = spec.decay_start();
  if (step <= start || start == spec.total_steps) return stable;
  const double lr_min = spec.min_ratio * stable;
  const double tau = static_cast<double>(step - start) / static_cast<double>(spec.total_steps - start);
  if (tau >= 1.0) return lr_min;
  return lr_min + (stable - lr_min) * (1.0 - std::sqrt(tau));
}

double schedule_lr(std::int64_t step, const ScheduleSpec& spec) {
  return spec.kind == ScheduleKind::cosine ? cosine_lr(step, spec) : wsd_lr(step, spec);
}

}  // namespace deskpt
