// SPDX-License-Identifier: Apache-2.0

#include "deskpt/data/corpus.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "deskpt/error.hpp"

namespace deskpt {

namespace {

constexpr std::array<const char*, 24> kNouns{
    "model",  "river", "signal", "garden", "theory", "window", "engine", "letter",
    "market", "forest", "matrix", "castle", "system", "bridge", "planet", "number",
    "circuit", "island", "memory", "report", "kernel", "teacher", "village", "record"};
constexpr std::array<const char*, 16> kVerbs{"moves",   "holds",  "finds",   "builds",  "shapes", "covers",
                                             "reaches", "checks", "follows", "carries", "meets",  "changes",
                                             "opens",   "tracks", "joins",   "keeps"};
constexpr std::array<const char*, 16> kAdjectives{"small", "quiet", "bright", "heavy", "early", "steady",
                                                  "green", "broken", "simple", "narrow", "warm", "distant",
                                                  "sharp", "gentle", "hidden", "final"};
constexpr std::array<const char*, 6> kDeterminers{"the", "a", "every", "that", "one", "this"};
constexpr std::array<const char*, 8> kTypes{"int", "float", "double", "auto", "size_t", "bool", "char", "long"};
constexpr std::array<const char*, 12> kIdents{"count", "total", "index", "value", "left", "right",
                                              "width", "limit", "offset", "scale", "step", "acc"};

// Zipf-like pick: index i with weight 1/(i+1).
template <typename Array>
const char* zipf(const Array& words, std::mt19937_64& rng) {
  static thread_local std::vector<double> w;
  w.resize(words.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> d(w.begin(), w.end());
  return words[d(rng)];
}

template <typename Array>
const char* uniform(const Array& words, std::mt19937_64& rng) {
  return words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
}

int rand_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::string prose_sentence(std::mt19937_64& rng) {
  std::string s = zipf(kDeterminers, rng);
  if (rand_int(rng, 0, 1)) s += std::string(" ") + zipf(kAdjectives, rng);
  s += std::string(" ") + zipf(kNouns, rng) + " " + zipf(kVerbs, rng) + " " + zipf(kDeterminers, rng);
  if (rand_int(rng, 0, 2) == 0) s += std::string(" ") + zipf(kAdjectives, rng);
  s += std::string(" ") + zipf(kNouns, rng);
  s += rand_int(rng, 0, 4) == 0 ? ", and " + std::string(zipf(kNouns, rng)) + " " + zipf(kVerbs, rng) + " it." : ".";
  s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string code_block(std::mt19937_64& rng) {
  const std::string a = uniform(kIdents, rng), b = uniform(kIdents, rng);
  const std::string type = uniform(kTypes, rng);
  switch (rand_int(rng, 0, 3)) {
    case 0:
      return type + " " + a + " = " + b + " + " + std::to_string(rand_int(rng, 0, 99)) + ";\n";
    case 1:
      return "for (" + type + " i = 0; i < " + a + "; ++i) {\n  " + b + " += i;\n}\n";
    case 2:
      return "if (" + a + " > " + b + ") {\n  return " + a + ";\n}\n";
    default:
      return type + " " + a + "_" + std::to_string(rand_int(rng, 0, 9)) + "(" + type + " " + b + ") {\n  return " +
             b + " * " + std::to_string(rand_int(rng, 2, 9)) + ";\n}\n";
  }
}

std::string math_line(std::mt19937_64& rng) {
  const int a = rand_int(rng, 0, 99), b = rand_int(rng, 0, 99);
  switch (rand_int(rng, 0, 2)) {
    case 0:
      return std::to_string(a) + " + " + std::to_string(b) + " = " + std::to_string(a + b) + "\n";
    case 1:
      return std::to_string(a) + " - " + std::to_string(b) + " = " + std::to_string(a - b) + "\n";
    default:
      return std::to_string(a % 13) + " * " + std::to_string(b % 13) + " = " + std::to_string((a % 13) * (b % 13)) +
             "\n";
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

SynthDocument synth_document(SynthKind kind, std::uint64_t target_chars, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SynthDocument doc;
  doc.quality = static_cast<float>(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
  while (doc.text.size() < target_chars) {
    switch (kind) {
      case SynthKind::prose:
        doc.text += prose_sentence(rng);
        doc.text += rand_int(rng, 0, 5) == 0 ? "\n\n" : " ";
        break;
      case SynthKind::code:
        doc.text += code_block(rng);
        break;
      case SynthKind::math:
        doc.text += math_line(rng);
        break;
    }
  }
  // Byte noise grows as quality drops: up to 30% of characters replaced.
  const double noise = 0.3 * (1.0 - doc.quality);
  std::bernoulli_distribution flip(noise);
  std::uniform_int_distribution<int> byte(32, 126);
  for (auto& c : doc.text) {
    if (flip(rng)) c = static_cast<char>(byte(rng));
  }
  return doc;
}

std::vector<TokenShard> synth_corpus(const SynthCorpusOptions& options) {
  if (options.docs_per_source == 0 || options.mean_chars == 0) throw ConfigError("synth corpus: empty options");
  const std::array<std::pair<SynthKind, const char*>, 3> kinds{
      {{SynthKind::prose, "prose"}, {SynthKind::code, "code"}, {SynthKind::math, "math"}}};
  std::vector<TokenShard> shards;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    std::mt19937_64 rng(mix_seed(options.seed, k));
    // Log-normal lengths with the requested mean, at least 16 characters.
    const double sigma = 0.8;
    std::lognormal_distribution<double> len(std::log(static_cast<double>(options.mean_chars)) - 0.5 * sigma * sigma,
                                            sigma);
    TokenShard shard;
    shard.source_name = kinds[k].second;
    for (std::uint64_t d = 0; d < options.docs_per_source; ++d) {
      const auto chars = std::max<std::uint64_t>(16, static_cast<std::uint64_t>(len(rng)));
      const auto doc = synth_document(kinds[k].first, chars, rng());
      const auto ids = byte_tokenize(doc.text);
      shard.add_document(ids, doc.text.size(), doc.quality);
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpusOptions& options) {
  for (const char* split : {"train", "heldout"}) {
    auto opts = options;
    opts.seed = mix_seed(options.seed, split[0] == 't' ? 100 : 200);
    if (split[0] == 'h') opts.docs_per_source = std::max<std::uint64_t>(1, options.docs_per_source / 10);
    const auto sub = dir / split;
    std::filesystem::create_directories(sub);
    for (const auto& shard : synth_corpus(opts)) write_shard(sub / (shard.source_name + ".shard"), shard);
  }
}

TokenShard uniform_byte_shard(std::string name, std::uint64_t docs, std::uint64_t doc_tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> byte(0, 255);
  TokenShard shard;
  shard.source_name = std::move(name);
  std::vector<std::int32_t> ids(doc_tokens);
  for (std::uint64_t d = 0; d < docs; ++d) {
    for (auto& id : ids) id = byte(rng);
    shard.add_document(ids, doc_tokens, std::numeric_limits<float>::quiet_NaN());
  }
  return shard;
}

namespace {

template <typename Encode>
TokenShard build_shard(std::string name, std::uint32_t vocab, const std::vector<std::string>& texts,
                       const std::vector<float>& quality, Encode encode) {
  if (!quality.empty() && quality.size() != texts.size()) throw ConfigError("quality list length mismatch");
  TokenShard shard;
  shard.source_name = std::move(name);
  shard.vocab_size = vocab;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].empty()) continue;
    const auto ids = encode(texts[i]);
    shard.add_document(ids, texts[i].size(), quality.empty() ? std::numeric_limits<float>::quiet_NaN() : quality[i]);
  }
  return shard;
}

}  // namespace

TokenShard shard_from_texts(std::string name, const std::vector<std::string>& texts,
                            const std::vector<float>& quality) {
  return build_shard(std::move(name), kByteVocab, texts, quality, [](const std::string& t) { return byte_tokenize(t); });
}

TokenShard shard_from_texts(std::string name, const std::vector<std::string>& texts, const BpeModel& bpe,
                            const std::vector<float>& quality) {
  return build_shard(std::move(name), static_cast<std::uint32_t>(bpe.vocab_size()), texts, quality,
                     [&](const std::string& t) { return bpe.encode(t); });
}

}  // namespace deskpt
