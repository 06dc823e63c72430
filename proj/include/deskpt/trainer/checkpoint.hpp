// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "deskpt/model/config.hpp"
#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/optimizer.hpp"
#include "json.hpp"

namespace deskpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

// Values are held as double; f32 tensors round-trip exactly through it.
struct StoredTensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointMeta {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::int64_t stage = 0;            // index into the run's stage list
  std::int64_t stage_iteration = 0;  // iterations completed inside that stage
  std::int64_t iteration = 0;        // iterations completed overall
  std::int64_t optim_step = 0;
  std::int64_t tokens = 0;
  std::string precision = "float";
  std::string config_hash;
};

void to_json(nlohmann::json& j, const CheckpointMeta& m);
void from_json(const nlohmann::json& j, CheckpointMeta& m);

struct Checkpoint {
  CheckpointMeta meta;
  std::map<std::string, StoredTensor> model;
  std::map<std::string, StoredTensor> optimizer;  // empty for averaged checkpoints
};

// Layout: "DPCK", u32 version, u64 header length, header JSON, u64 tensor
// count, then per tensor {u32 name length, name, u8 section (0 model,
// 1 optimizer), u8 dtype, u32 rank, u64 dims, little-endian values}.
// Written to a temp file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Checkpoint files (*.dpck) in a directory, oldest iteration first.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);

template <Real T>
StoredTensor store_tensor(const Tensor<T>& t);
template <Real T>
Tensor<T> restore_tensor(const StoredTensor& s);

template <Real T>
Checkpoint make_checkpoint(const Transformer<T>& model, const Optimizer<T>* optim, CheckpointMeta meta);

// Copies stored weights into `model`. ConfigError when the stored
// ModelConfig or tensor names/shapes differ from the model's.
template <Real T>
void load_model_weights(Transformer<T>& model, const Checkpoint& ckpt);

// Builds a model directly from a checkpoint.
template <Real T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt);

template <Real T>
void load_optimizer_state(Optimizer<T>& optim, const Checkpoint& ckpt);

}  // namespace deskpt
