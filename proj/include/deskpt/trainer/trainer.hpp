// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deskpt/data/mixture.hpp"
#include "deskpt/model/transformer.hpp"
#include "deskpt/optim/optimizer.hpp"
#include "deskpt/trainer/checkpoint.hpp"
#include "deskpt/trainer/run_config.hpp"
#include "json.hpp"

namespace deskpt {

struct IterationRecord {
  std::int64_t iteration = 0;  // 1-based, global
  double ce = 0.0;
  double z_term = 0.0;
};

struct UpdateRecord {
  std::int64_t iteration = 0;  // iteration that completed the update
  double lr_muon = 0.0;
  double lr_adamw = 0.0;
  double grad_norm = 0.0;
};

// Also mirrored to <out_dir>/manifest.jsonl as append-only events.
struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> stages;
  std::filesystem::path metrics_path;
  std::vector<std::filesystem::path> checkpoints;
};

void to_json(nlohmann::json& j, const RunManifest& m);

struct TrainResult {
  RunManifest manifest;
  std::vector<IterationRecord> losses;  // iterations run by this call
  std::vector<UpdateRecord> updates;
  std::int64_t iterations = 0;  // global count after the call
  std::int64_t tokens = 0;      // global count after the call
  // Mean train CE over the last final_loss_window iterations of this call.
  double final_loss = 0.0;
};

// Learning rates for the update with 0-based index `update` inside a stage.
// The schedule is evaluated at update + 1.
std::pair<double, double> stage_learning_rates(const StagePlan& plan, const OptimizerConfig& optim,
                                               std::int64_t update);

// Data seed of stage `stage_index`, derived from the run seed and the
// mixture seed so that different runs see different orders.
std::uint64_t stage_data_seed(std::uint64_t run_seed, std::size_t stage_index, std::uint64_t mixture_seed);

// Forward + backward over one micro-batch, adding into the parameter
// gradients. Returns (ce, z_term). NumericError on a non-finite loss.
template <Real T>
std::pair<double, double> accumulate_micro_batch(const Transformer<T>& model, const PackedBatch& batch, double z_loss);

// Multiplies every parameter gradient by `factor`.
template <Real T>
void scale_gradients(const Transformer<T>& model, double factor);

template <Real T>
class Trainer {
 public:
  Trainer(RunConfig config, ShardSet train);

  // Restores weights, optimizer state and position. ConfigError when the
  // checkpoint does not belong to this model/precision.
  void resume(const Checkpoint& ckpt);

  // Trains until the end of the last stage, or until the global iteration
  // count reaches `stop_at` (which must fall on an update boundary).
  TrainResult run(std::optional<std::int64_t> stop_at = std::nullopt);

  Checkpoint checkpoint() const;
  const Transformer<T>& model() const { return model_; }
  Transformer<T>& model() { return model_; }
  const Optimizer<T>& optimizer() const { return optim_; }
  const RunConfig& config() const { return config_; }
  std::int64_t iteration() const { return iteration_; }

 private:
  std::filesystem::path save(const std::string& reason);
  void log_event(const nlohmann::json& event);
  [[noreturn]] void numeric_failure(const std::string& what, double ce, double z);

  RunConfig config_;
  ShardSet train_;
  Transformer<T> model_;
  Optimizer<T> optim_;
  std::size_t stage_ = 0;
  std::int64_t stage_iteration_ = 0;
  std::int64_t iteration_ = 0;
  std::int64_t tokens_ = 0;
  RunManifest manifest_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

// Builds the model and optimizer a run config describes (muP applied).
template <Real T>
Transformer<T> build_model(const RunConfig& config);

// Loads shards, optionally resumes, trains, dispatching on precision.
TrainResult train_from_config(const RunConfig& config, const std::optional<std::filesystem::path>& resume = {});

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::int64_t tokens = 0;
};

// Mean CE over n_batches packed from every held-out source with equal
// weight, using a fixed seed. ConfigError on an empty held-out set.
template <Real T>
EvalResult eval_loss(const Transformer<T>& model, ShardSet heldout, std::int64_t batch, std::int64_t seq,
                     std::int64_t n_batches, std::uint64_t seed = 0);

}  // namespace deskpt
