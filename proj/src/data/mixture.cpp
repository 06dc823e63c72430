// SPDX-License-Identifier: Apache-2.0

#include "deskpt/data/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deskpt/data/tokenizer.hpp"
#include "deskpt/error.hpp"

namespace deskpt {

void MixtureSpec::validate() const {
  double sum = 0.0;
  for (const auto& [name, w] : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("mixture weight for '" + name + "' must be >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw ConfigError("mixture weights must sum to a positive value");
  if (min_quality && std::isnan(*min_quality)) throw ConfigError("min_quality must be a number");
}

bool MixtureSpec::keeps(std::uint64_t char_length, float quality) const {
  if (min_char_length && char_length < *min_char_length) return false;
  if (min_quality && !(static_cast<double>(quality) >= *min_quality)) return false;
  return true;
}

void to_json(nlohmann::json& j, const MixtureSpec& m) {
  j = {{"weights", m.weights}, {"seed", m.seed}};
  if (m.min_char_length) j["min_char_length"] = *m.min_char_length;
  if (m.min_quality) j["min_quality"] = *m.min_quality;
}

void from_json(const nlohmann::json& j, MixtureSpec& m) {
  m.weights = j.at("weights").get<std::map<std::string, double>>();
  m.seed = j.value("seed", m.seed);
  m.min_char_length.reset();
  m.min_quality.reset();
  if (j.contains("min_char_length") && !j["min_char_length"].is_null()) {
    m.min_char_length = j["min_char_length"].get<std::uint64_t>();
  }
  if (j.contains("min_quality") && !j["min_quality"].is_null()) m.min_quality = j["min_quality"].get<double>();
}

std::size_t eligible_count(const TokenShard& shard, const MixtureSpec& spec) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < shard.doc_count(); ++i) n += spec.keeps(shard.char_lengths[i], shard.quality[i]);
  return n;
}

MixtureSampler::MixtureSampler(ShardSet shards, MixtureSpec spec)
    : shards_(std::move(shards)), spec_(std::move(spec)), rng_(spec_.seed) {
  spec_.validate();
  if (!shards_) throw ConfigError("mixture sampler: no shards");
  for (const auto& [name, w] : spec_.weights) {
    const bool known = std::any_of(shards_->begin(), shards_->end(),
                                   [&](const TokenShard& s) { return s.source_name == name; });
    if (!known) throw ConfigError("mixture names unknown source '" + name + "'");
  }
  std::vector<double> weights;
  for (const auto& shard : *shards_) {
    auto it = spec_.weights.find(shard.source_name);
    if (it == spec_.weights.end() || it->second == 0.0) continue;
    Source src{shard.source_name, &shard, {}, 0, 0};
    for (std::size_t i = 0; i < shard.doc_count(); ++i) {
      if (spec_.keeps(shard.char_lengths[i], shard.quality[i])) src.docs.push_back(i);
    }
    if (src.docs.empty()) continue;
    std::shuffle(src.docs.begin(), src.docs.end(), rng_);
    sources_.push_back(std::move(src));
    weights.push_back(it->second);
  }
  if (sources_.empty()) throw ConfigError("mixture: no source has documents passing the filters");
  pick_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
}

std::span<const std::int32_t> MixtureSampler::next_document() {
  last_ = pick_(rng_);
  Source& src = sources_[last_];
  if (src.cursor == src.docs.size()) {
    std::shuffle(src.docs.begin(), src.docs.end(), rng_);
    src.cursor = 0;
    ++src.epoch;
  }
  return src.shard->doc(src.docs[src.cursor++]);
}

std::map<std::string, std::uint64_t> MixtureSampler::epochs() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto& s : sources_) out[s.name] = s.epoch;
  return out;
}

std::vector<std::string> MixtureSampler::active_sources() const {
  std::vector<std::string> out;
  for (const auto& s : sources_) out.push_back(s.name);
  return out;
}

BatchStream::BatchStream(ShardSet shards, MixtureSpec spec, std::int64_t batch, std::int64_t seq)
    : sampler_(std::move(shards), std::move(spec)), batch_(batch), seq_(seq) {
  if (batch < 1 || seq < 1) throw ConfigError("batch and seq must be >= 1");
}

PackedBatch BatchStream::next() {
  const auto n = static_cast<std::size_t>(batch_ * seq_);
  while (buffer_.size() < n + 1) {
    auto doc = sampler_.next_document();
    buffer_.insert(buffer_.end(), doc.begin(), doc.end());
    buffer_.push_back(kEos);
  }
  PackedBatch out;
  out.batch = batch_;
  out.seq = seq_;
  out.tokens.assign(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(n));
  out.targets.assign(buffer_.begin() + 1, buffer_.begin() + static_cast<std::ptrdiff_t>(n) + 1);
  out.loss_mask.assign(n, 1);
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(n));
  ++emitted_;
  return out;
}

void BatchStream::skip(std::uint64_t batches) {
  for (std::uint64_t i = 0; i < batches; ++i) next();
}

BatchPrefetcher::BatchPrefetcher(BatchStream stream, std::size_t capacity)
    : stream_(std::move(stream)), capacity_(std::max<std::size_t>(capacity, 1)) {
  worker_ = std::thread([this] { run(); });
}

BatchPrefetcher::~BatchPrefetcher() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void BatchPrefetcher::run() {
  for (;;) {
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
      if (stop_) return;
    }
    try {
      PackedBatch b = stream_.next();
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(b));
    } catch (...) {
      std::lock_guard lock(mu_);
      error_ = std::current_exception();
      cv_.notify_all();
      return;
    }
    cv_.notify_all();
  }
}

PackedBatch BatchPrefetcher::next() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return !queue_.empty() || error_; });
  if (queue_.empty()) std::rethrow_exception(error_);
  PackedBatch b = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  cv_.notify_all();
  return b;
}

}  // namespace deskpt
