// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "szdl/nifti.hpp"

namespace szdl {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const std::uint8_t* take(std::uint64_t n) {
    if (n > bytes_.size() - pos_) {
      throw Error(ErrorCode::CorruptPayload, "declared length " + std::to_string(n) + " exceeds remaining " +
                                                 std::to_string(bytes_.size() - pos_) + " bytes");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += static_cast<std::size_t>(n);
    return p;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out{'S', 'Z', 'D', 'L'};
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = checkpoint.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  put<std::uint64_t>(out, checkpoint.arrays.size());
  for (const auto& a : checkpoint.arrays) {
    if (shape_count(a.shape) != a.data.size()) {
      throw Error(ErrorCode::ShapeMismatch, "array " + a.name + " has inconsistent shape");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, a.data.size());
    const auto* p = reinterpret_cast<const std::uint8_t*>(a.data.data());
    out.insert(out.end(), p, p + a.data.size() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SZDL", 4) != 0) {
    throw Error(ErrorCode::BadMagic, "not a checkpoint file");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  const auto meta_len = r.get<std::uint64_t>();
  const auto* meta = reinterpret_cast<const char*>(r.take(meta_len));
  try {
    c.meta = nlohmann::json::parse(std::string(meta, static_cast<std::size_t>(meta_len)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto name_len = r.get<std::uint32_t>();
    const auto* name = reinterpret_cast<const char*>(r.take(name_len));
    a.name.assign(name, name_len);
    const auto ndim = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) a.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto n = r.get<std::uint64_t>();
    if (n != shape_count(a.shape)) throw Error(ErrorCode::CorruptPayload, "array " + a.name + " count mismatch");
    if (n > (std::uint64_t{1} << 40)) throw Error(ErrorCode::CorruptPayload, "array " + a.name + " too large");
    const std::uint8_t* p = r.take(n * sizeof(float));
    a.data.resize(static_cast<std::size_t>(n));
    std::memcpy(a.data.data(), p, a.data.size() * sizeof(float));
    c.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw Error(ErrorCode::CorruptPayload, "trailing bytes after checkpoint arrays");
  return c;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  nifti::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(nifti::read_file(path)); }

template <typename Real>
void export_model(const Model<Real>& model, Checkpoint& checkpoint) {
  checkpoint.meta["model_config"] = to_json(model.config());
  auto add = [&](const std::string& name, const Tensor<Real>& t) {
    NamedArray a{name, t.shape(), {}};
    for (Real v : t.values()) a.data.push_back(static_cast<float>(v));
    checkpoint.arrays.push_back(std::move(a));
  };
  for (const auto& p : model.parameters()) add(p.name, p.tensor);
  for (const auto& b : model.buffers()) add(b.name, b.tensor);
}

template <typename Real>
Model<Real> import_model(const Checkpoint& checkpoint) {
  if (!checkpoint.meta.contains("model_config")) {
    throw Error(ErrorCode::CorruptPayload, "checkpoint has no model_config");
  }
  Model<Real> model(model_config_from_json(checkpoint.meta["model_config"]), 0);
  auto restore = [&](const std::string& name, Tensor<Real>& t) {
    const NamedArray* a = checkpoint.find(name);
    if (a == nullptr) throw Error(ErrorCode::CorruptPayload, "checkpoint lacks " + name);
    if (a->shape != t.shape()) throw Error(ErrorCode::CorruptPayload, "checkpoint shape mismatch for " + name);
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(a->data[i]);
  };
  for (auto& p : model.parameters()) restore(p.name, p.tensor);
  for (auto& b : model.buffers()) restore(b.name, b.tensor);
  return model;
}

template void export_model(const Model<float>&, Checkpoint&);
template void export_model(const Model<double>&, Checkpoint&);
template Model<float> import_model(const Checkpoint&);
template Model<double> import_model(const Checkpoint&);

}  // namespace szdl
