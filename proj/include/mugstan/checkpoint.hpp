#pragma once

// MGSK checkpoints: a named tensor table in little-endian binary.
//
//   "MGSK" | version u32 = 1 | count u32
//   per tensor: name_len u32 | name | rank u32 | rank x u64 extents | f64 values
//
// The run configuration is stored next to it as "<file>.json".

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "mugstan/embedding_io.hpp"
#include "mugstan/layers.hpp"

namespace mugstan {

inline constexpr char kCheckpointMagic[4] = {'M', 'G', 'S', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<T>& tensors) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (auto x : t.data()) w.f64(static_cast<double>(x));
  }
  return w.data();
}

inline std::map<std::string, Tensor<double>> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw ParseError("bad checkpoint magic", 0);
  const std::size_t vpos = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(v), vpos);
  }
  const std::size_t count = r.u32("tensor count");
  std::map<std::string, Tensor<double>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t npos = r.offset();
    const std::size_t len = r.u32("name length");
    auto name = r.str(len, "name");
    const std::size_t rank = r.u32("rank");
    if (rank > 8) throw ParseError("implausible rank " + std::to_string(rank), npos);
    Shape shape;
    std::size_t n = 1;
    for (std::size_t k = 0; k < rank; ++k) {
      const std::size_t epos = r.offset();
      const auto e = r.u64("extent");
      if (e == 0 || e > r.remaining()) throw ParseError("bad extent", epos);
      shape.push_back(static_cast<std::size_t>(e));
      n *= static_cast<std::size_t>(e);
      if (n > r.remaining()) throw ParseError("truncated tensor " + name, epos);
    }
    r.need(8 * n, "tensor values");
    std::vector<double> values(n);
    for (auto& x : values) x = r.f64("value");
    if (!out.emplace(name, Tensor<double>(shape, std::move(values))).second) {
      throw ParseError("duplicate tensor " + name, npos);
    }
  }
  if (!r.at_end()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const NamedTensors<T>& tensors,
                     const nlohmann::json& config = nlohmann::json::object()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, encode_checkpoint(tensors));
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  if (!js) throw IoError("cannot write checkpoint config for " + path.string());
  js << config.dump(2) << '\n';
}

inline std::map<std::string, Tensor<double>> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Copies stored values into `targets` by name. Every target must be present
/// with a matching shape.
template <class T>
void restore_tensors(const std::map<std::string, Tensor<double>>& stored, const NamedTensors<T>& targets) {
  for (auto [name, t] : targets) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw ContractError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " + to_string(it->second.shape()) +
                           ", model expects " + to_string(t.shape()));
    }
    auto dst = t.mutable_data();
    const auto src = it->second.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

}  // namespace mugstan
