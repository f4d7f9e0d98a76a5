#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "udissect/error.hpp"
#include "udissect/model.hpp"

namespace udissect {

// Binary layout, all integers little-endian:
//   "UDISSECT" | u32 version | config block | u32 len + provenance bytes |
//   u32 tensor count | per tensor: u32 len + name | u32 rank | u32 dims[rank] | f32 data
// Config block: u32 num_layers, hidden_dim, mlp_dim, num_heads, vocab_size,
// max_seq_len, mlp_style, require_expansion; u64 seed.
inline constexpr char kCheckpointMagic[8] = {'U', 'D', 'I', 'S', 'S', 'E', 'C', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorKind::CorruptCheckpoint, "truncated checkpoint");
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& w, const std::string& provenance = {}) {
  detail::ByteWriter out;
  out.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.u32(kCheckpointVersion);
  const ModelConfig& c = w.config;
  for (std::uint32_t v : {c.num_layers, c.hidden_dim, c.mlp_dim, c.num_heads, c.vocab_size, c.max_seq_len,
                          static_cast<std::uint32_t>(c.mlp_style), std::uint32_t(c.require_expansion ? 1 : 0)}) {
    out.u32(v);
  }
  out.u64(c.seed);
  out.str(provenance);
  std::uint32_t count = 0;
  for_each_param(w, [&](const std::string&, const Tensor<float>&, ParamGroup) { ++count; });
  out.u32(count);
  for_each_param(w, [&](const std::string& name, const Tensor<float>& t, ParamGroup) {
    out.str(name);
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) out.u32(static_cast<std::uint32_t>(dim));
    for (float v : t.data()) out.f32(v);
  });
  return out.bytes();
}

struct DecodedCheckpoint {
  Checkpoint weights;
  std::string provenance;
};

inline DecodedCheckpoint decode_checkpoint(std::vector<char> bytes) {
  detail::ByteReader in(std::move(bytes));
  require(in.raw(8) == std::string(kCheckpointMagic, 8), ErrorKind::CorruptCheckpoint, "bad magic");
  const std::uint32_t version = in.u32();
  require(version == kCheckpointVersion, ErrorKind::CorruptCheckpoint,
          "unsupported checkpoint version " + std::to_string(version));
  DecodedCheckpoint out;
  ModelConfig& c = out.weights.config;
  c.num_layers = in.u32();
  c.hidden_dim = in.u32();
  c.mlp_dim = in.u32();
  c.num_heads = in.u32();
  c.vocab_size = in.u32();
  c.max_seq_len = in.u32();
  const std::uint32_t style = in.u32();
  require(style <= 1, ErrorKind::CorruptCheckpoint, "unknown mlp style");
  c.mlp_style = static_cast<MlpStyle>(style);
  c.require_expansion = in.u32() != 0;
  c.seed = in.u64();
  c.validate();
  out.provenance = in.str();

  const auto layout = parameter_layout(c);
  const std::uint32_t count = in.u32();
  require(count == layout.size(), ErrorKind::CorruptCheckpoint,
          "expected " + std::to_string(layout.size()) + " tensors, found " + std::to_string(count));
  out.weights.layers.resize(c.num_layers);
  std::size_t index = 0;
  for_each_param(out.weights, [&](const std::string& name, Tensor<float>& t, ParamGroup) {
    const std::string stored = in.str();
    require(stored == name, ErrorKind::CorruptCheckpoint, "expected tensor " + name + ", found " + stored);
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& dim : shape) dim = in.u32();
    require(shape == layout[index].second, ErrorKind::CorruptCheckpoint,
            "tensor " + name + " has shape " + shape_string(shape));
    std::vector<float> data(shape_size(shape));
    for (float& v : data) v = in.f32();
    t = Tensor<float>(shape, std::move(data));
    ++index;
  });
  require(in.at_end(), ErrorKind::CorruptCheckpoint, "trailing bytes after last tensor");
  return out;
}

inline void save_checkpoint(const Checkpoint& w, const std::filesystem::path& path,
                            const std::string& provenance = {}) {
  const auto bytes = encode_checkpoint(w, provenance);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(bool(f), ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(bool(f), ErrorKind::IoFailure, "write failed for " + path.string());
}

inline DecodedCheckpoint load_checkpoint_with_provenance(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorKind::MissingArtifact, "cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint_with_provenance(path).weights;
}

}  // namespace udissect
