// SPDX-License-Identifier: Apache-2.0

#include "deskpt/data/tokenizer.hpp"

#include <algorithm>
#include <limits>
#include <unordered_map>

#include "deskpt/error.hpp"

namespace deskpt {

std::vector<std::int32_t> byte_tokenize(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string byte_detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || id >= kByteVocab) throw FormatError("token id " + std::to_string(id) + " outside byte vocabulary");
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

namespace {

using Pair = std::pair<std::int32_t, std::int32_t>;

std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

// Replaces non-overlapping occurrences of (a, b), scanning left to right.
void merge_in_place(std::vector<std::int32_t>& seq, std::int32_t a, std::int32_t b, std::int32_t id) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < seq.size();) {
    if (r + 1 < seq.size() && seq[r] == a && seq[r + 1] == b) {
      seq[w++] = id;
      r += 2;
    } else {
      seq[w++] = seq[r++];
    }
  }
  seq.resize(w);
}

}  // namespace

std::vector<std::int32_t> BpeModel::encode(std::string_view text) const {
  std::vector<std::int32_t> seq = byte_tokenize(text);
  if (merges.empty() || seq.size() < 2) return seq;
  std::unordered_map<std::uint64_t, std::int32_t> rank;
  rank.reserve(merges.size());
  for (std::size_t k = 0; k < merges.size(); ++k) {
    rank.emplace(pair_key(merges[k].first, merges[k].second), static_cast<std::int32_t>(k));
  }
  while (seq.size() >= 2) {
    std::int32_t best = std::numeric_limits<std::int32_t>::max();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = rank.find(pair_key(seq[i], seq[i + 1]));
      if (it != rank.end()) best = std::min(best, it->second);
    }
    if (best == std::numeric_limits<std::int32_t>::max()) break;
    const auto& m = merges[static_cast<std::size_t>(best)];
    merge_in_place(seq, m.first, m.second, kByteVocab + best);
  }
  return seq;
}

std::string BpeModel::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  std::vector<std::int32_t> stack;
  for (std::int32_t id : ids) {
    if (id < 0 || id >= vocab_size()) throw FormatError("token id " + std::to_string(id) + " outside BPE vocabulary");
    stack.push_back(id);
    while (!stack.empty()) {
      const std::int32_t t = stack.back();
      stack.pop_back();
      if (t < 256) {
        out.push_back(static_cast<char>(t));
      } else if (t >= kByteVocab) {
        const auto& m = merges[static_cast<std::size_t>(t - kByteVocab)];
        stack.push_back(m.second);
        stack.push_back(m.first);
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const BpeModel& m) {
  j = nlohmann::json{{"merges", nlohmann::json::array()}};
  for (const auto& [a, b] : m.merges) j["merges"].push_back({a, b});
}

void from_json(const nlohmann::json& j, BpeModel& m) {
  m.merges.clear();
  for (const auto& pair : j.at("merges")) {
    const auto a = pair.at(0).get<std::int32_t>();
    const auto b = pair.at(1).get<std::int32_t>();
    const auto next = kByteVocab + static_cast<std::int32_t>(m.merges.size());
    if (a < 0 || b < 0 || a >= next || b >= next || a == kEos || a == kPad || b == kEos || b == kPad) {
      throw FormatError("BPE merge refers to an unknown token");
    }
    m.merges.emplace_back(a, b);
  }
}

BpeTrainResult bpe_train(const std::vector<std::string>& corpus, std::int32_t vocab_size) {
  if (corpus.empty()) throw ConfigError("bpe_train: empty corpus");
  if (vocab_size <= kByteVocab) throw ConfigError("bpe_train: vocab_size must exceed 258");
  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(corpus.size());
  for (const auto& d : corpus) docs.push_back(byte_tokenize(d));

  BpeTrainResult result;
  while (result.model.vocab_size() < vocab_size) {
    std::unordered_map<std::uint64_t, std::int64_t> counts;
    for (const auto& seq : docs) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pair_key(seq[i], seq[i + 1])];
    }
    std::uint64_t best_key = 0;
    std::int64_t best_count = 0;
    for (const auto& [key, count] : counts) {
      // Keys order as (left, right) lexicographically.
      if (count > best_count || (count == best_count && key < best_key)) {
        best_key = key;
        best_count = count;
      }
    }
    if (best_count < 2) {
      result.reached_vocab = false;
      break;
    }
    const auto a = static_cast<std::int32_t>(best_key >> 32);
    const auto b = static_cast<std::int32_t>(best_key & 0xffffffffULL);
    const std::int32_t id = result.model.vocab_size();
    result.model.merges.emplace_back(a, b);
    for (auto& seq : docs) merge_in_place(seq, a, b, id);
  }
  return result;
}

}  // namespace deskpt
