// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "deskpt/data/shard.hpp"
#include "json.hpp"

namespace deskpt {

struct MixtureSpec {
  std::map<std::string, double> weights;  // keyed by source_name
  std::optional<std::uint64_t> min_char_length;  // keep docs with char_length >= this
  std::optional<double> min_quality;  // keep docs with quality >= this; NaN never passes
  std::uint64_t seed = 0;

  void validate() const;
  bool keeps(std::uint64_t char_length, float quality) const;
};

void to_json(nlohmann::json& j, const MixtureSpec& m);
void from_json(const nlohmann::json& j, MixtureSpec& m);

using ShardSet = std::shared_ptr<const std::vector<TokenShard>>;

// Number of documents of one shard that pass the MixtureSpec filters.
std::size_t eligible_count(const TokenShard& shard, const MixtureSpec& spec);

// Draws whole documents: a source by weight, then that source's next document
// in a seeded shuffled order. An exhausted source is reshuffled and its epoch
// counter bumped. Sources whose documents all fail the filters are dropped;
// ConfigError when nothing remains.
class MixtureSampler {
 public:
  MixtureSampler(ShardSet shards, MixtureSpec spec);

  std::span<const std::int32_t> next_document();
  const std::string& last_source() const { return sources_[last_].name; }
  // Completed passes per source.
  std::map<std::string, std::uint64_t> epochs() const;
  std::vector<std::string> active_sources() const;

 private:
  struct Source {
    std::string name;
    const TokenShard* shard;
    std::vector<std::size_t> docs;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
  };

  ShardSet shards_;
  MixtureSpec spec_;
  std::vector<Source> sources_;
  std::discrete_distribution<std::size_t> pick_;
  std::mt19937_64 rng_;
  std::size_t last_ = 0;
};

// tokens, targets and loss_mask are row-major (batch, seq).
struct PackedBatch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> loss_mask;
};

// Concatenates sampled documents, each followed by EOS, and cuts the stream
// into consecutive rows of length seq. Target t is stream token t + 1, so the
// last target of a batch is the first token of the next one.
class BatchStream {
 public:
  BatchStream(ShardSet shards, MixtureSpec spec, std::int64_t batch, std::int64_t seq);

  PackedBatch next();
  void skip(std::uint64_t batches);
  std::uint64_t batches_emitted() const { return emitted_; }
  const MixtureSampler& sampler() const { return sampler_; }

 private:
  MixtureSampler sampler_;
  std::int64_t batch_;
  std::int64_t seq_;
  std::vector<std::int32_t> buffer_;
  std::uint64_t emitted_ = 0;
};

// Runs a BatchStream on a worker thread, keeping up to `capacity` batches
// ready. Batches come out in stream order.
class BatchPrefetcher {
 public:
  BatchPrefetcher(BatchStream stream, std::size_t capacity = 4);
  ~BatchPrefetcher();
  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  // Rethrows any exception raised by the producer.
  PackedBatch next();

 private:
  void run();

  BatchStream stream_;
  std::size_t capacity_;
  std::deque<PackedBatch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::thread worker_;
};

}  // namespace deskpt
