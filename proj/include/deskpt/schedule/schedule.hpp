// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

#include "json.hpp"

namespace deskpt {

enum class ScheduleKind { cosine, wsd };

std::string_view schedule_kind_name(ScheduleKind kind);

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::cosine;
  double peak_lr = 1.0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double min_ratio = 0.01;
  // WSD only.
  double stable_fraction_of_peak = 0.55;
  double decay_fraction = 0.20;

  void validate() const;
  // First step of the WSD decay interval.
  std::int64_t decay_start() const;
};

void to_json(nlohmann::json& j, const ScheduleSpec& s);
void from_json(const nlohmann::json& j, ScheduleSpec& s);

// Linear warmup from 0, then peak * (min_ratio + (1 - min_ratio) * (1 + cos(pi tau)) / 2).
double cosine_lr(std::int64_t step, const ScheduleSpec& spec);

// Warmup to stable_lr = stable_fraction_of_peak * peak, hold, then
// lr_min + (stable_lr - lr_min) * (1 - sqrt(tau_d)) with lr_min = min_ratio * stable_lr.
double wsd_lr(std::int64_t step, const ScheduleSpec& spec);

double schedule_lr(std::int64_t step, const ScheduleSpec& spec);

}  // namespace deskpt
