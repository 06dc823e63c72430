// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deskpt/data/shard.hpp"
#include "deskpt/data/tokenizer.hpp"

namespace deskpt {

// Synthetic byte-level text with three flavours, so that the mixture and the
// quality filters have something to act on.
enum class SynthKind { prose, code, math };

struct SynthDocument {
  std::string text;
  float quality;  // in [0, 1]; low-quality documents carry byte noise
};

SynthDocument synth_document(SynthKind kind, std::uint64_t target_chars, std::uint64_t seed);

struct SynthCorpusOptions {
  std::uint64_t docs_per_source = 200;
  std::uint64_t mean_chars = 1500;
  std::uint64_t seed = 1;
};

// One shard per kind, named prose/code/math.
std::vector<TokenShard> synth_corpus(const SynthCorpusOptions& options);

// Writes <dir>/train and <dir>/heldout from independent seeds.
void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& options);

// Independent uniform bytes; an untrained model scores about ln(258) here.
TokenShard uniform_byte_shard(std::string name, std::uint64_t docs, std::uint64_t doc_tokens, std::uint64_t seed);

// Byte-tokenizes each text as one document. quality may be empty (all NaN).
TokenShard shard_from_texts(std::string name, const std::vector<std::string>& texts,
                            const std::vector<float>& quality = {});

// Same, encoding with a BPE model.
TokenShard shard_from_texts(std::string name, const std::vector<std::string>& texts, const BpeModel& bpe,
                            const std::vector<float>& quality = {});

}  // namespace deskpt
