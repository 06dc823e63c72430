// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deskpt {

inline constexpr std::uint32_t kShardVersion = 1;

// One source's documents. doc_offsets has doc_count() + 1 entries, starting
// at 0 and ending at token_ids.size(). quality is NaN when a score is absent.
struct TokenShard {
  std::string source_name;
  std::uint32_t vocab_size = 258;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint64_t> doc_offsets{0};
  std::vector<std::uint64_t> char_lengths;
  std::vector<float> quality;

  std::size_t doc_count() const { return char_lengths.size(); }
  std::span<const std::int32_t> doc(std::size_t i) const;
  void add_document(std::span<const std::int32_t> ids, std::uint64_t char_length, float quality_score);
  // Throws FormatError on broken offsets, empty documents or ids >= vocab_size.
  void validate() const;
};

bool operator==(const TokenShard& a, const TokenShard& b);

// Layout: "DPSH", u32 version, u32 vocab_size, u64 doc_count, per document
// {u64 token_count, u64 char_length, f32 quality}, then u32 token ids. All
// little-endian. Writes go to a temp file which is renamed into place.
void write_shard(const std::filesystem::path& path, const TokenShard& shard);
// source_name is taken from the file stem.
TokenShard read_shard(const std::filesystem::path& path);

// All *.shard files in a directory, sorted by name.
std::vector<TokenShard> read_shard_dir(const std::filesystem::path& dir);

}  // namespace deskpt
