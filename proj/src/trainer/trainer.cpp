// SPDX-License-Identifier: Apache-2.0

#include "deskpt/trainer/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "deskpt/data/shard.hpp"
#include "deskpt/error.hpp"
#include "deskpt/optim/mup.hpp"
#include "deskpt/tensor/graph.hpp"

namespace deskpt {

void to_json(nlohmann::json& j, const RunManifest& m) {
  std::vector<std::string> ckpts;
  for (const auto& c : m.checkpoints) ckpts.push_back(c.string());
  j = {{"config_hash", m.config_hash},
       {"seed", m.seed},
       {"stages", m.stages},
       {"metrics_path", m.metrics_path.string()},
       {"checkpoints", ckpts}};
}

std::pair<double, double> stage_learning_rates(const StagePlan& plan, const OptimizerConfig& optim,
                                               std::int64_t update) {
  const double muon_peak = plan.muon_lr.value_or(optim.muon_lr);
  const double adamw_peak = plan.adamw_lr.value_or(optim.adamw_lr);
  return {muon_peak * schedule_lr(update + 1, plan.muon_schedule),
          adamw_peak * schedule_lr(update + 1, plan.adamw_schedule)};
}

std::uint64_t stage_data_seed(std::uint64_t run_seed, std::size_t stage_index, std::uint64_t mixture_seed) {
  std::uint64_t z = run_seed * 0x9e3779b97f4a7c15ULL + mixture_seed + 0xbf58476d1ce4e5b9ULL * (stage_index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <Real T>
std::pair<double, double> accumulate_micro_batch(const Transformer<T>& model, const PackedBatch& batch,
                                                 double z_loss) {
  Graph<T> graph;
  GraphScope<T> scope(graph);
  auto logits = model.forward(batch.tokens, batch.batch, batch.seq);
  auto loss = loss_ce_zloss<T>(logits, batch.targets, batch.loss_mask, z_loss);
  const double ce = static_cast<double>(loss.ce.item());
  const double z = static_cast<double>(loss.z_term.item());
  if (!std::isfinite(ce) || !std::isfinite(z)) {
    throw NumericError("non-finite loss (ce " + std::to_string(ce) + ", z " + std::to_string(z) + ")");
  }
  graph.backward(loss.total);
  return {ce, z};
}

template <Real T>
void scale_gradients(const Transformer<T>& model, double factor) {
  for (const auto& p : model.parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (auto& g : p.tensor.mutable_grad()) g = static_cast<T>(g * factor);
  }
}

template <Real T>
Transformer<T> build_model(const RunConfig& config) {
  ModelConfig mc = config.model;
  InitOptions init = config.init;
  if (config.mup.enabled) {
    const MupPlan plan = mup_apply(mc, config.mup);
    mc.output_scale = plan.output_scale;
    init.hidden_std_mult *= plan.init.hidden_std_mult;
  }
  Transformer<T> model(mc, config.seed, init);
  model.set_requires_grad(true);
  return model;
}

namespace {

template <Real T>
std::map<std::string, double> lr_multipliers(const RunConfig& config, const Transformer<T>& model) {
  if (!config.mup.enabled) return {};
  return mup_lr_multipliers(model, mup_apply(config.model, config.mup));
}

}  // namespace

template <Real T>
Trainer<T>::Trainer(RunConfig config, ShardSet train)
    : config_(std::move(config)),
      train_(std::move(train)),
      model_(build_model<T>(config_)),
      optim_(model_, config_.optimizer, lr_multipliers(config_, model_)) {
  config_.validate();
  if (config_.precision != (std::is_same_v<T, float> ? "float" : "double")) {
    throw ConfigError("trainer precision does not match config precision '" + config_.precision + "'");
  }
  if (!train_) throw ConfigError("trainer: no training shards");
  manifest_.config_hash = config_.hash();
  manifest_.seed = config_.seed;
  for (const auto& s : config_.stages) manifest_.stages.push_back(s.name);
  if (!config_.out_dir.empty()) {
    std::filesystem::create_directories(config_.out_dir / "checkpoints");
    manifest_.metrics_path = config_.out_dir / "metrics.jsonl";
  }
}

template <Real T>
void Trainer<T>::resume(const Checkpoint& ckpt) {
  const std::string precision = std::is_same_v<T, float> ? "float" : "double";
  if (ckpt.meta.precision != precision) {
    throw ConfigError("checkpoint precision '" + ckpt.meta.precision + "' does not match run precision");
  }
  if (ckpt.meta.stage < 0 || static_cast<std::size_t>(ckpt.meta.stage) >= config_.stages.size()) {
    throw ConfigError("checkpoint stage index is outside this run's stage list");
  }
  const auto& plan = config_.stages[static_cast<std::size_t>(ckpt.meta.stage)];
  if (ckpt.meta.stage_iteration % plan.grad_accum != 0 || ckpt.meta.stage_iteration > plan.iterations) {
    throw ConfigError("checkpoint position does not fall on an update boundary of this run");
  }
  load_model_weights(model_, ckpt);
  load_optimizer_state(optim_, ckpt);
  stage_ = static_cast<std::size_t>(ckpt.meta.stage);
  stage_iteration_ = ckpt.meta.stage_iteration;
  iteration_ = ckpt.meta.iteration;
  tokens_ = ckpt.meta.tokens;
  log_event({{"event", "resume"}, {"iteration", iteration_}, {"config_hash", ckpt.meta.config_hash}});
}

template <Real T>
Checkpoint Trainer<T>::checkpoint() const {
  CheckpointMeta meta;
  meta.seed = config_.seed;
  meta.stage = static_cast<std::int64_t>(stage_);
  meta.stage_iteration = stage_iteration_;
  meta.iteration = iteration_;
  meta.tokens = tokens_;
  meta.config_hash = manifest_.config_hash;
  return make_checkpoint(model_, &optim_, meta);
}

template <Real T>
std::filesystem::path Trainer<T>::save(const std::string& reason) {
  char name[64];
  std::snprintf(name, sizeof(name), "ckpt_%09lld.dpck", static_cast<long long>(iteration_));
  const auto path = config_.out_dir / "checkpoints" / name;
  save_checkpoint(path, checkpoint());
  manifest_.checkpoints.push_back(path);
  log_event({{"event", "checkpoint"}, {"reason", reason}, {"iteration", iteration_}, {"path", path.string()}});
  return path;
}

template <Real T>
void Trainer<T>::log_event(const nlohmann::json& event) {
  if (config_.out_dir.empty()) return;
  std::ofstream out(config_.out_dir / "manifest.jsonl", std::ios::app);
  out << event.dump() << '\n';
}

template <Real T>
void Trainer<T>::numeric_failure(const std::string& what, double ce, double z) {
  if (!config_.out_dir.empty()) {
    nlohmann::json dump = {{"error", what}, {"iteration", iteration_ + 1}, {"stage", stage_},
                           {"stage_iteration", stage_iteration_}, {"ce", std::to_string(ce)},
                           {"z_term", std::to_string(z)}};
    for (const auto& p : model_.parameters()) {
      double sq = 0.0, gsq = 0.0;
      bool finite = true;
      for (T v : p.tensor.data()) {
        sq += static_cast<double>(v) * v;
        finite = finite && std::isfinite(static_cast<double>(v));
      }
      if (p.tensor.has_grad()) {
        for (T g : p.tensor.grad()) gsq += static_cast<double>(g) * g;
      }
      dump["params"][p.name] = {{"rms", std::sqrt(sq / static_cast<double>(p.tensor.numel()))},
                                {"grad_rms", std::to_string(std::sqrt(gsq / static_cast<double>(p.tensor.numel())))},
                                {"finite", finite}};
    }
    std::ofstream(config_.out_dir / "numeric_failure.json") << dump.dump(2) << '\n';
    log_event({{"event", "numeric_failure"}, {"iteration", iteration_ + 1}, {"error", what}});
  }
  throw NumericError(what + " at iteration " + std::to_string(iteration_ + 1));
}

template <Real T>
TrainResult Trainer<T>::run(std::optional<std::int64_t> stop_at) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  std::ofstream metrics;
  if (!config_.out_dir.empty()) {
    metrics.open(manifest_.metrics_path, std::ios::app);
    log_event({{"event", "start"}, {"iteration", iteration_}, {"config_hash", manifest_.config_hash},
               {"seed", config_.seed}, {"stages", manifest_.stages}, {"metrics", manifest_.metrics_path.string()}});
  }
  double log_ce = 0.0, log_z = 0.0;
  std::int64_t log_n = 0;
  UpdateRecord last_update;
  bool stopped = false;

  while (stage_ < config_.stages.size() && !stopped) {
    const StagePlan& plan = config_.stages[stage_];
    MixtureSpec mixture = plan.mixture;
    mixture.seed = stage_data_seed(config_.data_seed.value_or(config_.seed), stage_, plan.mixture.seed);
    BatchStream stream(train_, mixture, plan.batch, plan.seq);
    stream.skip(static_cast<std::uint64_t>(stage_iteration_));
    BatchPrefetcher batches(std::move(stream), config_.prefetch);

    while (stage_iteration_ < plan.iterations) {
      if (stop_at && iteration_ >= *stop_at) {
        stopped = true;
        break;
      }
      if (stage_iteration_ % plan.grad_accum == 0) model_.zero_grad();
      const PackedBatch batch = batches.next();
      std::pair<double, double> loss;
      try {
        loss = accumulate_micro_batch(model_, batch, config_.z_loss);
      } catch (const NumericError& e) {
        numeric_failure(e.what(), NAN, NAN);
      }
      ++stage_iteration_;
      ++iteration_;
      tokens_ += plan.tokens_per_iteration();
      result.losses.push_back({iteration_, loss.first, loss.second});
      log_ce += loss.first;
      log_z += loss.second;
      ++log_n;

      if (stage_iteration_ % plan.grad_accum == 0) {
        scale_gradients(model_, 1.0 / static_cast<double>(plan.grad_accum));
        const auto [lr_muon, lr_adamw] =
            stage_learning_rates(plan, config_.optimizer, stage_iteration_ / plan.grad_accum - 1);
        StepStats stats;
        try {
          stats = optim_.step(model_, lr_muon, lr_adamw);
        } catch (const NumericError& e) {
          numeric_failure(e.what(), loss.first, loss.second);
        }
        last_update = {iteration_, lr_muon, lr_adamw, stats.grad_norm};
        result.updates.push_back(last_update);
        if (plan.checkpoint_every > 0 && stage_iteration_ % plan.checkpoint_every == 0 &&
            stage_iteration_ < plan.iterations && !config_.out_dir.empty()) {
          save("interval");
        }
      }
      if (iteration_ % config_.log_every == 0 && metrics.is_open()) {
        const auto wall =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
        metrics << nlohmann::json{{"iter", iteration_},
                                  {"tokens", tokens_},
                                  {"loss", log_ce / static_cast<double>(log_n)},
                                  {"zloss", log_z / static_cast<double>(log_n)},
                                  {"lr_muon", last_update.lr_muon},
                                  {"lr_adamw", last_update.lr_adamw},
                                  {"grad_norm", last_update.grad_norm},
                                  {"wall_ms", wall}}
                       .dump()
                << '\n';
        metrics.flush();
        log_ce = log_z = 0.0;
        log_n = 0;
      }
    }
    if (stopped) break;
    if (!config_.out_dir.empty()) save("stage_end");
    log_event({{"event", "stage_end"}, {"stage", plan.name}, {"iteration", iteration_}});
    ++stage_;
    stage_iteration_ = 0;
  }
  if (stopped) {
    const auto& plan = config_.stages[stage_];
    if (stage_iteration_ % plan.grad_accum != 0) throw ConfigError("stop_at must fall on an update boundary");
  }

  result.iterations = iteration_;
  result.tokens = tokens_;
  result.manifest = manifest_;
  if (!result.losses.empty()) {
    const auto window = std::min<std::size_t>(static_cast<std::size_t>(config_.final_loss_window), result.losses.size());
    double sum = 0.0;
    for (std::size_t i = result.losses.size() - window; i < result.losses.size(); ++i) sum += result.losses[i].ce;
    result.final_loss = sum / static_cast<double>(window);
  }
  log_event({{"event", stage_ >= config_.stages.size() ? "end" : "pause"}, {"iteration", iteration_},
             {"tokens", tokens_}, {"final_loss", result.final_loss}});
  return result;
}

template class Trainer<float>;
template class Trainer<double>;

namespace {

template <Real T>
TrainResult train_typed(const RunConfig& config, const std::optional<std::filesystem::path>& resume) {
  if (config.train_data.empty()) throw ConfigError("config has no train_data directory");
  auto shards = std::make_shared<const std::vector<TokenShard>>(read_shard_dir(config.train_data));
  if (shards->empty()) throw ConfigError("no .shard files in " + config.train_data.string());
  for (const auto& s : *shards) {
    if (static_cast<std::int64_t>(s.vocab_size) > config.model.vocab_size) {
      throw ConfigError("shard " + s.source_name + " vocabulary exceeds model vocab_size");
    }
  }
  Trainer<T> trainer(config, shards);
  if (resume) trainer.resume(load_checkpoint(*resume));
  return trainer.run();
}

}  // namespace

TrainResult train_from_config(const RunConfig& config, const std::optional<std::filesystem::path>& resume) {
  return config.precision == "double" ? train_typed<double>(config, resume) : train_typed<float>(config, resume);
}

template <Real T>
EvalResult eval_loss(const Transformer<T>& model, ShardSet heldout, std::int64_t batch, std::int64_t seq,
                     std::int64_t n_batches, std::uint64_t seed) {
  if (n_batches < 1) throw ConfigError("eval needs n_batches >= 1");
  if (!heldout || heldout->empty()) throw ConfigError("empty held-out set");
  MixtureSpec spec;
  spec.seed = seed;
  for (const auto& s : *heldout) {
    if (s.doc_count() > 0) spec.weights[s.source_name] = 1.0;
  }
  if (spec.weights.empty()) throw ConfigError("empty held-out set");
  BatchStream stream(std::move(heldout), spec, batch, seq);
  NoGradScope<T> no_grad;
  double sum = 0.0;
  for (std::int64_t i = 0; i < n_batches; ++i) {
    const auto b = stream.next();
    auto logits = model.forward(b.tokens, b.batch, b.seq);
    sum += static_cast<double>(loss_ce_zloss<T>(logits, b.targets, b.loss_mask, 0.0).ce.item());
  }
  EvalResult r;
  r.loss = sum / static_cast<double>(n_batches);
  r.perplexity = std::exp(r.loss);
  r.tokens = n_batches * batch * seq;
  return r;
}

#define DESKPT_INSTANTIATE(T)                                                                                   \
  template std::pair<double, double> accumulate_micro_batch<T>(const Transformer<T>&, const PackedBatch&,       \
                                                               double);                                         \
  template void scale_gradients<T>(const Transformer<T>&, double);                                              \
  template Transformer<T> build_model<T>(const RunConfig&);                                                     \
  template EvalResult eval_loss<T>(const Transformer<T>&, ShardSet, std::int64_t, std::int64_t, std::int64_t, \
                                   std::uint64_t);

DESKPT_INSTANTIATE(float)
DESKPT_INSTANTIATE(double)
#undef DESKPT_INSTANTIATE

}  // namespace deskpt
