#pragma once

// MGSV embedding files: little-endian binary.
//
//   "MGSV" | version u32 = 1 | pair_count u32 | D u32
//   per pair: T u32 | K u32 | T*D f32 frames | K*D f32 tokens | K u8 mask | summary u32
//
// A sibling "<file>.json" manifest carries free-form dataset metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mugstan/encoders.hpp"

namespace mugstan {

template <class T>
struct EmbeddingPair {
  FrameSequence<T> video;
  TokenSequence<T> text;
};

inline constexpr char kEmbeddingMagic[4] = {'M', 'G', 'S', 'V'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw ParseError(std::string("truncated input while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_embeddings(const std::vector<EmbeddingPair<T>>& pairs,
                                            std::size_t dim = 0) {
  if (!pairs.empty()) dim = pairs.front().video.values.dim(-1);
  detail::ByteWriter w;
  w.bytes(kEmbeddingMagic, 4);
  w.u32(kEmbeddingVersion);
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  w.u32(static_cast<std::uint32_t>(dim));
  for (const auto& p : pairs) {
    const auto& v = p.video.values;
    const auto& c = p.text.values;
    p.text.validate();
    if (v.rank() != 2 || v.dim(1) != dim || c.dim(1) != dim) {
      throw DimensionError("embedding pair width differs from file width " + std::to_string(dim));
    }
    w.u32(static_cast<std::uint32_t>(v.dim(0)));
    w.u32(static_cast<std::uint32_t>(c.dim(0)));
    for (auto x : v.data()) w.f32(static_cast<float>(x));
    for (auto x : c.data()) w.f32(static_cast<float>(x));
    for (auto m : p.text.valid) w.u8(m ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(p.text.summary_index));
  }
  return w.data();
}

template <class T>
std::vector<EmbeddingPair<T>> decode_embeddings(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != std::string(kEmbeddingMagic, 4)) throw ParseError("bad magic", 0);
  const std::size_t vpos = r.offset();
  const auto version = r.u32("version");
  if (version != kEmbeddingVersion) {
    throw ParseError("unsupported version " + std::to_string(version), vpos);
  }
  const std::size_t count = r.u32("pair count");
  const std::size_t dpos = r.offset();
  const std::size_t D = r.u32("dimension");
  if (count > 0 && D == 0) throw ParseError("zero embedding width", dpos);
  std::vector<EmbeddingPair<T>> pairs;
  pairs.reserve(count);
  for (std::size_t p = 0; p < count; ++p) {
    const std::size_t hpos = r.offset();
    const std::size_t Tn = r.u32("frame count");
    const std::size_t K = r.u32("token count");
    if (Tn == 0 || K == 0) throw ParseError("pair " + std::to_string(p) + " is empty", hpos);
    if (Tn + K > r.remaining() / (4 * D)) {
      throw ParseError("truncated input while reading embedding values", r.offset());
    }
    std::vector<T> frames(Tn * D), tokens(K * D);
    for (auto& x : frames) x = static_cast<T>(r.f32("frames"));
    for (auto& x : tokens) x = static_cast<T>(r.f32("tokens"));
    std::vector<std::uint8_t> mask(K);
    for (auto& m : mask) {
      const std::size_t mpos = r.offset();
      m = r.u8("mask");
      if (m > 1) throw ParseError("mask byte must be 0 or 1", mpos);
    }
    const std::size_t spos = r.offset();
    const std::size_t summary = r.u32("summary index");
    if (summary >= K || !mask[summary]) {
      throw ParseError("summary index " + std::to_string(summary) + " invalid", spos);
    }
    EmbeddingPair<T> ep;
    ep.video.values = Tensor<T>({Tn, D}, std::move(frames));
    ep.text.values = Tensor<T>({K, D}, std::move(tokens));
    ep.text.valid = std::move(mask);
    ep.text.summary_index = summary;
    pairs.push_back(std::move(ep));
  }
  if (!r.at_end()) throw ParseError("trailing bytes after last pair", r.offset());
  return pairs;
}

template <class T>
void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingPair<T>>& pairs,
                      const nlohmann::json& manifest = nlohmann::json::object(), std::size_t dim = 0) {
  const auto bytes = encode_embeddings(pairs, dim);
  detail::write_file(path, bytes);
  nlohmann::json m = manifest;
  m["format"] = "MGSV";
  m["version"] = kEmbeddingVersion;
  m["pair_count"] = pairs.size();
  m["dim"] = pairs.empty() ? dim : pairs.front().video.values.dim(-1);
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  if (!js) throw IoError("cannot write manifest for " + path.string());
  js << m.dump(2) << '\n';
}

template <class T>
std::vector<EmbeddingPair<T>> load_embeddings(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_embeddings<T>(bytes);
}

}  // namespace mugstan
