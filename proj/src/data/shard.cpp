// SPDX-License-Identifier: Apache-2.0

#include "deskpt/data/shard.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>

#include "deskpt/error.hpp"

namespace deskpt {

std::span<const std::int32_t> TokenShard::doc(std::size_t i) const {
  if (i >= doc_count()) throw Error("shard " + source_name + ": document index out of range");
  return std::span<const std::int32_t>(token_ids).subspan(doc_offsets[i], doc_offsets[i + 1] - doc_offsets[i]);
}

void TokenShard::add_document(std::span<const std::int32_t> ids, std::uint64_t char_length, float quality_score) {
  token_ids.insert(token_ids.end(), ids.begin(), ids.end());
  doc_offsets.push_back(token_ids.size());
  char_lengths.push_back(char_length);
  quality.push_back(quality_score);
}

void TokenShard::validate() const {
  auto fail = [this](const std::string& what) { throw FormatError("shard " + source_name + ": " + what); };
  if (quality.size() != char_lengths.size()) fail("metadata length mismatch");
  if (doc_offsets.size() != doc_count() + 1 || doc_offsets.front() != 0) fail("bad document offsets");
  for (std::size_t i = 0; i < doc_count(); ++i) {
    if (doc_offsets[i + 1] <= doc_offsets[i]) fail("document offsets must be strictly increasing");
  }
  if (doc_offsets.back() != token_ids.size()) fail("offsets do not cover the token stream");
  for (auto id : token_ids) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= vocab_size) fail("token id out of vocabulary");
  }
}

bool operator==(const TokenShard& a, const TokenShard& b) {
  return a.source_name == b.source_name && a.vocab_size == b.vocab_size && a.token_ids == b.token_ids &&
         a.doc_offsets == b.doc_offsets && a.char_lengths == b.char_lengths &&
         a.quality.size() == b.quality.size() &&
         std::equal(a.quality.begin(), a.quality.end(), b.quality.begin(),
                    [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

namespace {

constexpr std::array<char, 4> kMagic{'D', 'P', 'S', 'H'};

template <typename U>
void put_le(std::string& buf, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, std::string name) : data_(data), name_(std::move(name)) {}

  template <typename U>
  U get() {
    if (pos_ + sizeof(U) > data_.size()) throw FormatError("shard " + name_ + ": truncated file");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::string& data_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_shard(const std::filesystem::path& path, const TokenShard& shard) {
  shard.validate();
  std::string buf(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(buf, kShardVersion);
  put_le<std::uint32_t>(buf, shard.vocab_size);
  put_le<std::uint64_t>(buf, shard.doc_count());
  for (std::size_t i = 0; i < shard.doc_count(); ++i) {
    put_le<std::uint64_t>(buf, shard.doc_offsets[i + 1] - shard.doc_offsets[i]);
    put_le<std::uint64_t>(buf, shard.char_lengths[i]);
    put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(shard.quality[i]));
  }
  buf.reserve(buf.size() + 4 * shard.token_ids.size());
  for (auto id : shard.token_ids) put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(id));

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TokenShard read_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open shard " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  TokenShard shard;
  shard.source_name = path.stem().string();
  const std::string& name = shard.source_name;
  if (data.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), data.begin())) {
    throw FormatError("shard " + name + ": bad magic");
  }
  Reader r(data, name);
  r.advance(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kShardVersion) {
    throw FormatError("shard " + name + ": unsupported version " + std::to_string(version));
  }
  shard.vocab_size = r.get<std::uint32_t>();
  const auto docs = r.get<std::uint64_t>();
  // 20 bytes of metadata per document must be present before allocating.
  if (docs > r.remaining() / 20) throw FormatError("shard " + name + ": truncated file");
  std::vector<std::uint64_t> counts(docs);
  shard.char_lengths.resize(docs);
  shard.quality.resize(docs);
  std::uint64_t total = 0;
  for (std::uint64_t i = 0; i < docs; ++i) {
    counts[i] = r.get<std::uint64_t>();
    shard.char_lengths[i] = r.get<std::uint64_t>();
    shard.quality[i] = std::bit_cast<float>(r.get<std::uint32_t>());
    total += counts[i];
    shard.doc_offsets.push_back(total);
  }
  if (total > r.remaining() / 4) throw FormatError("shard " + name + ": truncated file");
  if (r.remaining() != 4 * total) throw FormatError("shard " + name + ": trailing bytes after token ids");
  shard.token_ids.resize(total);
  for (auto& id : shard.token_ids) {
    const auto v = r.get<std::uint32_t>();
    if (v >= shard.vocab_size) throw FormatError("shard " + name + ": token id out of vocabulary");
    id = static_cast<std::int32_t>(v);
  }
  shard.validate();
  return shard;
}

std::vector<TokenShard> read_shard_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".shard") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<TokenShard> shards;
  for (const auto& f : files) shards.push_back(read_shard(f));
  return shards;
}

}  // namespace deskpt
