#pragma once

// Checkpoint container, little-endian throughout:
//
//   "MTPCKPT\0"                      8-byte magic
//   u32 format_version
//   u32 n_entries, then n_entries x {u32 len, key bytes, u32 len, value bytes}
//   u32 n_records, then n_records x
//       {u32 len, utf-8 name, u8 dtype (1 = f32), u32 rank, u64 dims[rank],
//        f32 payload[prod(dims)]}
//   u64 FNV-1a over all payload bytes, in record order
//
// The header carries the ModelConfig plus free-form metadata (vocabulary,
// corpus, training flags) as key/value strings.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtp/model/config.hpp"
#include "mtp/model/model.hpp"
#include "mtp/numerics/rng.hpp"
#include "mtp/sampler.hpp"

namespace mtp {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'T', 'P', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint8_t kDtypeF32 = 1;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ChecksumError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelBundle<float> model;
  std::optional<SamplerHead<float>> sampler;
  KeyValues meta;  // header entries other than model.*
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    std::string_view v(buf_.data() + pos_, n);
    pos_ += n;
    return v;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

inline void put_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(bits >> (8 * i)));
}

inline float get_f32_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelBundle<float>& model,
                                        const SamplerHead<float>* sampler,
                                        const KeyValues& meta) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  KeyValues header = model.config.to_key_values();
  for (const auto& [k, v] : meta) {
    if (k.rfind("model.", 0) == 0) throw std::invalid_argument("metadata key collides with model config: " + k);
    header[k] = v;
  }
  w.u32(static_cast<std::uint32_t>(header.size()));
  for (const auto& [k, v] : header) {
    w.str(k);
    w.str(v);
  }
  auto records = model.named_parameters();
  if (sampler) {
    for (auto& r : sampler->named_parameters()) records.push_back(r);
  }
  w.u32(static_cast<std::uint32_t>(records.size()));
  std::uint64_t checksum = fnv1a64("");
  for (const auto& [name, t] : records) {
    w.str(name);
    w.u8(kDtypeF32);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) w.u64(dim);
    std::string payload;
    payload.reserve(t.size() * 4);
    for (float f : t.data()) detail::put_f32_le(payload, f);
    checksum = fnv1a64(payload, checksum);
    w.raw(payload.data(), payload.size());
  }
  w.u64(checksum);
  return w.bytes();
}

inline void save_checkpoint(const std::string& path, const ModelBundle<float>& model,
                            const SamplerHead<float>* sampler, const KeyValues& meta = {}) {
  const std::string bytes = serialize_checkpoint(model, sampler, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

// `expected`, when given, must match the stored config exactly; otherwise a
// ConfigError lists every differing key.
inline Checkpoint deserialize_checkpoint(std::string bytes,
                                         const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::ByteReader r(std::move(bytes));
  const auto magic = r.raw(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw IoError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       ", this build reads " + std::to_string(kCheckpointVersion));
  }
  KeyValues header;
  const std::uint32_t n_entries = r.u32();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    std::string k = r.str();
    header[k] = r.str();
  }
  KeyValues model_kv, meta;
  for (const auto& [k, v] : header) (k.rfind("model.", 0) == 0 ? model_kv : meta)[k] = v;
  const ModelConfig config = ModelConfig::from_key_values(model_kv);
  if (expected && !(*expected == config)) {
    std::string report = "checkpoint config mismatch:";
    for (const auto& line : diff_key_values(expected->to_key_values(), model_kv)) report += "\n  " + line;
    throw ConfigError(report);
  }

  Checkpoint ck;
  ck.model = init_model<float>(config, 0);
  ck.meta = std::move(meta);
  std::map<std::string, Tensor<float>> slots;
  for (auto& [name, t] : ck.model.named_parameters()) slots[name] = t;
  SamplerHead<float> head = init_sampler<float>(config.d_model, 0);
  std::map<std::string, Tensor<float>> head_slots;
  for (auto& [name, t] : head.named_parameters()) head_slots[name] = t;

  std::uint64_t checksum = fnv1a64("");
  std::size_t model_seen = 0, head_seen = 0;
  const std::uint32_t n_records = r.u32();
  for (std::uint32_t i = 0; i < n_records; ++i) {
    const std::string name = r.str();
    if (r.u8() != kDtypeF32) throw IoError("unsupported dtype in record " + name);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& dim : shape) dim = r.u64();
    const std::size_t n = shape_size(shape);
    const auto payload = r.raw(n * 4);
    checksum = fnv1a64(payload, checksum);
    Tensor<float>* slot = nullptr;
    if (auto it = slots.find(name); it != slots.end()) {
      slot = &it->second;
      ++model_seen;
    } else if (auto jt = head_slots.find(name); jt != head_slots.end()) {
      slot = &jt->second;
      ++head_seen;
    } else {
      throw IoError("unexpected record " + name);
    }
    if (slot->shape() != shape) {
      throw IoError("record " + name + " has shape " + shape_string(shape) + ", expected " +
                    shape_string(slot->shape()));
    }
    auto dst = slot->mutable_data();
    for (std::size_t j = 0; j < n; ++j) dst[j] = detail::get_f32_le(payload.data() + 4 * j);
  }
  const std::uint64_t stored = r.u64();
  if (stored != checksum) throw ChecksumError("checkpoint payload checksum mismatch");
  if (!r.at_end()) throw IoError("trailing bytes after checkpoint");
  if (model_seen != slots.size()) throw IoError("checkpoint is missing model records");
  if (head_seen != 0) {
    if (head_seen != head_slots.size()) throw IoError("checkpoint has a partial sampler head");
    ck.sampler = std::move(head);
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes), expected);
}

}  // namespace mtp
