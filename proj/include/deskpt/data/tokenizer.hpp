// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace deskpt {

inline constexpr std::int32_t kEos = 256;
inline constexpr std::int32_t kPad = 257;
inline constexpr std::int32_t kByteVocab = 258;

std::vector<std::int32_t> byte_tokenize(std::string_view text);
// Specials are dropped; ids >= kByteVocab throw FormatError.
std::string byte_detokenize(std::span<const std::int32_t> ids);

// Merge k creates token id kByteVocab + k from an adjacent pair.
struct BpeModel {
  std::vector<std::pair<std::int32_t, std::int32_t>> merges;

  std::int32_t vocab_size() const { return kByteVocab + static_cast<std::int32_t>(merges.size()); }
  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;
};

void to_json(nlohmann::json& j, const BpeModel& m);
void from_json(const nlohmann::json& j, BpeModel& m);

struct BpeTrainResult {
  BpeModel model;
  // False when no pair occurred twice before vocab_size was reached.
  bool reached_vocab = true;
};

// Greedy most-frequent-pair merging over documents (pairs never span two
// documents). Ties go to the lexicographically smallest (left, right) pair.
BpeTrainResult bpe_train(const std::vector<std::string>& corpus, std::int32_t vocab_size);

}  // namespace deskpt
