#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pivot/diffcore/params.hpp"

namespace pivot {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

/// Checkpoint layout:
///   "GTCK" | u32 version | u64 manifest_bytes | manifest JSON | blob
/// The manifest lists every tensor as {name, dtype, shape, offset, bytes};
/// offsets are relative to the start of the blob.
inline constexpr char kCheckpointMagic[4] = {'G', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

template <class Scalar, class Out>
void append_scalars(Out& blob, const std::vector<double>& values) {
  const std::size_t start = blob.size();
  blob.resize(start + values.size() * sizeof(Scalar));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar s = static_cast<Scalar>(values[i]);
    std::memcpy(blob.data() + start + i * sizeof(Scalar), &s, sizeof(Scalar));
  }
}

}  // namespace detail

/// Serialise named tensors with the given on-disk dtype ("f32" or "f64").
/// `extra` is stored verbatim under the manifest's "meta" key.
inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors, const std::string& dtype,
                                     const nlohmann::json& extra = nlohmann::json::object()) {
  if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("checkpoint: unknown dtype '" + dtype + "'");
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : tensors) {
    if (shape_size(t.shape) != t.values.size()) {
      throw std::invalid_argument("checkpoint: tensor '" + t.name + "' shape does not match its data");
    }
    const std::size_t offset = blob.size();
    if (dtype == "f32") {
      detail::append_scalars<float>(blob, t.values);
    } else {
      detail::append_scalars<double>(blob, t.values);
    }
    entries.push_back({{"name", t.name},
                       {"dtype", dtype},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"bytes", blob.size() - offset}});
  }
  nlohmann::json manifest = {{"tensors", entries}, {"meta", extra}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, 4);
  auto put = [&out](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(kCheckpointVersion);
  put(static_cast<std::uint64_t>(text.size()));
  out += text;
  out.append(blob.data(), blob.size());
  return out;
}

struct DecodedCheckpoint {
  std::vector<NamedTensor> tensors;
  std::string dtype;
  nlohmann::json meta;
};

inline DecodedCheckpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic bytes");
  }
  std::uint32_t version = 0;
  std::uint64_t mlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&mlen, bytes.data() + 8, 8);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  if (16 + mlen > bytes.size()) throw DataError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  const std::size_t blob_start = 16 + mlen;
  DecodedCheckpoint out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    const std::string dtype = e.at("dtype").get<std::string>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t width = dtype == "f32" ? 4 : 8;
    const std::size_t n = shape_size(t.shape);
    if (dtype != "f32" && dtype != "f64") throw DataError("checkpoint: unknown dtype '" + dtype + "'");
    if (blob_start + offset + n * width > bytes.size()) throw DataError("checkpoint: truncated tensor '" + t.name + "'");
    t.values.resize(n);
    const char* p = bytes.data() + blob_start + offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, p + i * 4, 4);
        t.values[i] = f;
      } else {
        std::memcpy(&t.values[i], p + i * 8, 8);
      }
    }
    out.dtype = dtype;
    out.tensors.push_back(std::move(t));
  }
  return out;
}

template <class T>
std::vector<NamedTensor> named_tensors(const ParamStore<T>& store) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = store.at(i);
    out.push_back({store.names()[i], t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  return out;
}

template <class T>
std::string encode_checkpoint(const ParamStore<T>& store, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta = extra;
  meta["step"] = store.step();
  return encode_checkpoint(named_tensors(store), dtype_name<T>(), meta);
}

/// Overwrite the values of `store` from a checkpoint. Every stored parameter must be present.
template <class T>
nlohmann::json load_into(ParamStore<T>& store, const DecodedCheckpoint& ck) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& name = store.names()[i];
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter '" + name + "'");
    auto& dst = store.at(i);
    if (it->second->shape != dst.shape()) {
      throw DataError("checkpoint: parameter '" + name + "' has shape " + shape_str(it->second->shape) +
                      ", expected " + shape_str(dst.shape()));
    }
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(it->second->values[j]);
  }
  if (ck.meta.contains("step")) store.set_step(ck.meta.at("step").get<std::uint64_t>());
  return ck.meta;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace pivot
