// SPDX-License-Identifier: Apache-2.0

#include "deskpt/trainer/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>

#include "deskpt/error.hpp"

namespace deskpt {

void to_json(nlohmann::json& j, const CheckpointMeta& m) {
  j = {{"format_version", kCheckpointVersion},
       {"model", m.model},
       {"seed", m.seed},
       {"stage", m.stage},
       {"stage_iteration", m.stage_iteration},
       {"iteration", m.iteration},
       {"optim_step", m.optim_step},
       {"tokens", m.tokens},
       {"precision", m.precision},
       {"config_hash", m.config_hash}};
}

void from_json(const nlohmann::json& j, CheckpointMeta& m) {
  m.model = j.at("model").get<ModelConfig>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.stage = j.at("stage").get<std::int64_t>();
  m.stage_iteration = j.at("stage_iteration").get<std::int64_t>();
  m.iteration = j.at("iteration").get<std::int64_t>();
  m.optim_step = j.at("optim_step").get<std::int64_t>();
  m.tokens = j.at("tokens").get<std::int64_t>();
  m.precision = j.at("precision").get<std::string>();
  m.config_hash = j.value("config_hash", std::string{});
}

namespace {

constexpr char kMagic[4] = {'D', 'P', 'C', 'K'};

template <typename U>
void put(std::string& buf, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) throw FormatError("checkpoint " + path_ + ": truncated file");
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& buf, const std::string& name, std::uint8_t section, const StoredTensor& t) {
  if (static_cast<std::int64_t>(t.values.size()) != shape_numel(t.shape)) {
    throw Error("checkpoint tensor " + name + ": value count does not match shape");
  }
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
  buf += name;
  put<std::uint8_t>(buf, section);
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dtype));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) put<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
  for (double v : t.values) {
    if (t.dtype == DType::f32) {
      put<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
    }
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string buf(kMagic, kMagic + 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  const std::string header = nlohmann::json(ckpt.meta).dump();
  put<std::uint64_t>(buf, header.size());
  buf += header;
  put<std::uint64_t>(buf, ckpt.model.size() + ckpt.optimizer.size());
  for (const auto& [name, t] : ckpt.model) put_tensor(buf, name, 0, t);
  for (const auto& [name, t] : ckpt.optimizer) put_tensor(buf, name, 1, t);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string p = path.string();
  if (data.size() < 4 || !std::equal(kMagic, kMagic + 4, data.begin())) {
    throw FormatError("checkpoint " + p + ": bad magic");
  }
  Reader r(data, p);
  r.bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + p + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto header_len = r.get<std::uint64_t>();
  r.need(header_len);
  try {
    const auto header = nlohmann::json::parse(r.bytes(header_len));
    if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw FormatError("checkpoint " + p + ": header version mismatch");
    }
    ckpt.meta = header.get<CheckpointMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + p + ": bad header: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name = r.bytes(name_len);
    const auto section = r.get<std::uint8_t>();
    const auto dtype = r.get<std::uint8_t>();
    if (section > 1 || dtype > 1) throw FormatError("checkpoint " + p + ": bad tensor record " + name);
    StoredTensor t;
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      t.shape.push_back(static_cast<std::int64_t>(d));
      numel *= d;
    }
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    r.need(numel * width);
    t.values.resize(numel);
    for (auto& v : t.values) {
      v = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>()))
                                : std::bit_cast<double>(r.get<std::uint64_t>());
    }
    auto& dest = section == 0 ? ckpt.model : ckpt.optimizer;
    if (!dest.emplace(name, std::move(t)).second) throw FormatError("checkpoint " + p + ": duplicate tensor " + name);
  }
  if (!r.done()) throw FormatError("checkpoint " + p + ": trailing bytes");
  return ckpt;
}

std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::pair<std::int64_t, std::filesystem::path>> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".dpck") continue;
    found.emplace_back(load_checkpoint(entry.path()).meta.iteration, entry.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<std::filesystem::path> out;
  for (auto& [it, path] : found) out.push_back(path);
  return out;
}

template <Real T>
StoredTensor store_tensor(const Tensor<T>& t) {
  StoredTensor s;
  s.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  s.shape = t.shape();
  s.values.assign(t.data().begin(), t.data().end());
  return s;
}

template <Real T>
Tensor<T> restore_tensor(const StoredTensor& s) {
  std::vector<T> data(s.values.size());
  std::transform(s.values.begin(), s.values.end(), data.begin(), [](double v) { return static_cast<T>(v); });
  return Tensor<T>(s.shape, std::move(data));
}

template <Real T>
Checkpoint make_checkpoint(const Transformer<T>& model, const Optimizer<T>* optim, CheckpointMeta meta) {
  Checkpoint ckpt;
  meta.model = model.config();
  meta.precision = std::is_same_v<T, float> ? "float" : "double";
  if (optim) meta.optim_step = optim->steps();
  ckpt.meta = std::move(meta);
  for (const auto& p : model.parameters()) ckpt.model.emplace(p.name, store_tensor(p.tensor));
  if (optim) {
    for (const auto& [name, t] : optim->state_tensors()) {
      if (t.defined()) ckpt.optimizer.emplace(name, store_tensor(t));
    }
  }
  return ckpt;
}

template <Real T>
void load_model_weights(Transformer<T>& model, const Checkpoint& ckpt) {
  if (!(ckpt.meta.model == model.config())) {
    throw ConfigError("checkpoint model config does not match the requested model: checkpoint " +
                      nlohmann::json(ckpt.meta.model).dump() + " vs " + nlohmann::json(model.config()).dump());
  }
  if (ckpt.model.size() != model.parameters().size()) {
    throw ConfigError("checkpoint holds " + std::to_string(ckpt.model.size()) + " model tensors, model has " +
                      std::to_string(model.parameters().size()));
  }
  for (auto& p : model.parameters()) {
    auto it = ckpt.model.find(p.name);
    if (it == ckpt.model.end()) throw ConfigError("checkpoint lacks tensor " + p.name);
    if (it->second.shape != p.tensor.shape()) {
      throw ConfigError("checkpoint tensor " + p.name + " has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::transform(it->second.values.begin(), it->second.values.end(), dst.begin(),
                   [](double v) { return static_cast<T>(v); });
  }
}

template <Real T>
Transformer<T> model_from_checkpoint(const Checkpoint& ckpt) {
  Transformer<T> model(ckpt.meta.model, ckpt.meta.seed);
  load_model_weights(model, ckpt);
  return model;
}

template <Real T>
void load_optimizer_state(Optimizer<T>& optim, const Checkpoint& ckpt) {
  std::map<std::string, Tensor<T>> tensors;
  for (const auto& [name, s] : ckpt.optimizer) tensors.emplace(name, restore_tensor<T>(s));
  optim.load_state(tensors, ckpt.meta.optim_step);
}

#define DESKPT_INSTANTIATE(T)                                                                  \
  template StoredTensor store_tensor<T>(const Tensor<T>&);                                     \
  template Tensor<T> restore_tensor<T>(const StoredTensor&);                                   \
  template Checkpoint make_checkpoint<T>(const Transformer<T>&, const Optimizer<T>*, CheckpointMeta); \
  template void load_model_weights<T>(Transformer<T>&, const Checkpoint&);                     \
  template Transformer<T> model_from_checkpoint<T>(const Checkpoint&);                         \
  template void load_optimizer_state<T>(Optimizer<T>&, const Checkpoint&);

DESKPT_INSTANTIATE(float)
DESKPT_INSTANTIATE(double)
#undef DESKPT_INSTANTIATE

}  // namespace deskpt
