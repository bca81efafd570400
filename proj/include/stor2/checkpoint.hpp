#pragma once

// Binary checkpoint container.
//
//   bytes  field
//   8      magic "STOR2CKP"
//   u32    format version (1)
//   u32    scalar width in bytes (4 or 8)
//   u64    length L of the JSON header
//   L      JSON header {"kind": str, "config": {...}}
//   u32    tensor count
//   per tensor:
//     u32 name length, name bytes, u32 rank, u64 extents[rank],
//     numel(extents) little-endian scalars
//
// Parameter names are stable; loading requires an exact name and shape match.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/errors.hpp"
#include "stor2/io.hpp"
#include "stor2/tensor.hpp"

namespace stor2 {

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'O', 'R', '2', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::uint32_t scalar_bytes = 4;
  std::vector<StoredTensor> tensors;
};

template <class T>
std::string encode_checkpoint(const std::string& kind, const nlohmann::json& config,
                              const std::vector<Parameter<T>*>& params) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  io::ByteWriter w;
  w.put_bytes({kCheckpointMagic, 8});
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(T));
  const std::string header = nlohmann::json{{"kind", kind}, {"config", config}}.dump();
  w.put<std::uint64_t>(header.size());
  w.put_bytes(header);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->name.size()));
    w.put_bytes(p->name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->shape.size()));
    for (auto e : p->shape) w.put<std::uint64_t>(e);
    for (T v : p->value) w.put<T>(v);
  }
  return w.bytes();
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const std::vector<Parameter<T>*>& params) {
  io::write_file_atomic(path, encode_checkpoint(kind, config, params));
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  try {
    io::ByteReader r(bytes);
    if (r.get_bytes(8) != std::string_view(kCheckpointMagic, 8)) throw CheckpointError("not a checkpoint file");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.scalar_bytes = r.get<std::uint32_t>();
    if (ck.scalar_bytes != 4 && ck.scalar_bytes != 8) throw CheckpointError("bad scalar width");
    const auto header_len = r.get<std::uint64_t>();
    const auto header = nlohmann::json::parse(r.get_bytes(header_len));
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      StoredTensor t;
      t.name = std::string(r.get_bytes(r.get<std::uint32_t>()));
      const auto rank = r.get<std::uint32_t>();
      for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint64_t>());
      const std::size_t n = numel(t.shape);
      t.values.resize(n);
      for (std::size_t k = 0; k < n; ++k)
        t.values[k] = ck.scalar_bytes == 4 ? static_cast<double>(r.get<float>()) : r.get<double>();
      ck.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
    return ck;
  } catch (const IoError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

/// Copies stored values into `params`, which must match by name, order and shape.
template <class T>
void apply_checkpoint(const Checkpoint& ck, const std::vector<Parameter<T>*>& params) {
  if (ck.tensors.size() != params.size())
    throw CheckpointError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ck.tensors[i];
    auto& p = *params[i];
    if (t.name != p.name) throw CheckpointError("tensor " + std::to_string(i) + ": '" + t.name + "' != '" + p.name + "'");
    if (t.shape != p.shape)
      throw CheckpointError("tensor '" + t.name + "': shape " + to_string(t.shape) + " != " + to_string(p.shape));
    for (std::size_t k = 0; k < t.values.size(); ++k) p.value[k] = static_cast<T>(t.values[k]);
    p.zero_grad();
  }
}

}  // namespace stor2
