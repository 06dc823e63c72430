// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <string_view>
#include <vector>

#include "deskpt/trainer/checkpoint.hpp"

namespace deskpt {

enum class EmaMode {
  recurrence,  // e = c_1, then e = beta * e + (1 - beta) * c_i
  uniform,     // plain mean of the checkpoints
};

EmaMode parse_ema_mode(std::string_view name);

// Weight of each checkpoint (oldest first) in the averaged result.
std::vector<double> ema_weights(std::size_t count, double beta, EmaMode mode = EmaMode::recurrence);

// Averages model tensors of checkpoints ordered oldest to newest. The result
// carries the newest checkpoint's header and no optimizer state. ShapeError
// when tensor names or shapes differ.
Checkpoint posthoc_ema(const std::vector<Checkpoint>& ckpts, double beta, EmaMode mode = EmaMode::recurrence);

// Averages the last `last_n` checkpoints of a directory (0 takes all).
Checkpoint posthoc_ema_dir(const std::filesystem::path& dir, double beta, std::size_t last_n,
                           EmaMode mode = EmaMode::recurrence);

}  // namespace deskpt
