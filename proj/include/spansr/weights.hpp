#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/model.hpp"
#include "spansr/train.hpp"

namespace spansr {

// Weight file layout (all integers little-endian):
//   magic "SPANWT1\0" (8 bytes)
//   u32 version, u32 scale, u32 C, u32 C', u32 block count
//   u8 fused, u8 activation, u8 rep-branch mask (bit0 side1x1, bit1 identity)
//   u8 flags (bit0 use_residual, bit1 use_attention, bit2 attention trainable)
//   f32 attention a, f32 attention b
//   tensors in canonical parameter order, each:
//     u16 name length, name bytes, 4 x u32 dims, raw little-endian f32 payload
//   u32 CRC32 (IEEE) of every preceding byte
// Canonical order and names come from parameters(), so two serializations of
// the same model are byte-identical.

enum class WeightErrorKind {
  kIo,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kCrcMismatch,
  kMalformed,
};

class WeightError : public std::runtime_error {
 public:
  WeightError(WeightErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  WeightErrorKind kind() const { return kind_; }

 private:
  WeightErrorKind kind_;
};

namespace detail {

constexpr char kWeightMagic[8] = {'S', 'P', 'A', 'N', 'W', 'T', '1', '\0'};
constexpr char kCheckpointMagic[8] = {'S', 'P', 'A', 'N', 'O', 'P', 'T', '1'};
constexpr std::uint32_t kWeightVersion = 1;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t len) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + len);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits);
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t len) : data_(data), len_(len) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > len_) throw WeightError(WeightErrorKind::kTruncated, "weight file truncated");
    std::memcpy(p, data_ + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return le<std::uint8_t>(); }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return len_ - pos_; }

 private:
  template <typename U>
  U le() {
    if (pos_ + sizeof(U) > len_) {
      throw WeightError(WeightErrorKind::kTruncated, "weight file truncated");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::uint8_t* data_;
  std::size_t len_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

template <typename T>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor4<T>& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  const Shape4& s = t.shape();
  for (index_t d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
  for (index_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t[i]));
}

template <typename T>
void read_tensor(ByteReader& r, const std::string& expect_name, Tensor4<T>& t) {
  const std::uint16_t name_len = r.u16();
  std::string name(name_len, '\0');
  r.raw(name.data(), name_len);
  if (name != expect_name) {
    throw WeightError(WeightErrorKind::kMalformed,
                      "weight file: expected tensor '" + expect_name + "', found '" + name + "'");
  }
  Shape4 s;
  s.n = r.u32();
  s.c = r.u32();
  s.h = r.u32();
  s.w = r.u32();
  if (!(s == t.shape())) {
    throw WeightError(WeightErrorKind::kMalformed, "weight file: tensor '" + name +
                                                       "' has shape " + s.str() + ", expected " +
                                                       t.shape().str());
  }
  for (index_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(r.f32());
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightError(WeightErrorKind::kIo, "cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightError(WeightErrorKind::kIo, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightError(WeightErrorKind::kIo, "short write to " + path);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_weights(const SpanModel<T>& model) {
  detail::ByteWriter w;
  w.raw(detail::kWeightMagic, 8);
  w.u32(detail::kWeightVersion);
  w.u32(static_cast<std::uint32_t>(model.cfg.scale));
  w.u32(static_cast<std::uint32_t>(model.cfg.img_channels));
  w.u32(static_cast<std::uint32_t>(model.cfg.channels));
  w.u32(static_cast<std::uint32_t>(model.cfg.blocks));
  w.u8(model.fused ? 1 : 0);
  w.u8(static_cast<std::uint8_t>(model.cfg.act));
  std::uint8_t rep_mask = 0;
  if (model.cfg.rep_side1x1 && !model.fused) rep_mask |= 1;
  if (model.cfg.rep_identity && !model.fused) rep_mask |= 2;
  w.u8(rep_mask);
  std::uint8_t flags = 0;
  if (model.cfg.use_residual) flags |= 1;
  if (model.cfg.use_attention) flags |= 2;
  if (model.cfg.attention_trainable) flags |= 4;
  w.u8(flags);
  w.f32(static_cast<float>(model.att_a[0]));
  w.f32(static_cast<float>(model.att_b[0]));

  auto& m = const_cast<SpanModel<T>&>(model);
  for (const auto& p : parameters(m, /*trainable_only=*/false)) {
    if (p.name == "att.a" || p.name == "att.b") continue;  // lives in the header
    detail::write_tensor(w, p.name, *p.tensor);
  }
  std::vector<std::uint8_t> bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  return bytes;
}

// Deserializes from a byte buffer; `consumed` (when given) receives the number
// of bytes the weight section occupied, so a checkpoint can append to it.
template <typename T>
SpanModel<T> deserialize_weights(const std::vector<std::uint8_t>& bytes,
                                 std::size_t* consumed = nullptr) {
  detail::ByteReader r(bytes.data(), bytes.size());
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, detail::kWeightMagic, 8) != 0) {
    throw WeightError(WeightErrorKind::kBadMagic, "not a SPAN weight file");
  }
  const std::uint32_t version = r.u32();
  if (version != detail::kWeightVersion) {
    throw WeightError(WeightErrorKind::kBadVersion,
                      "unsupported weight format version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.scale = static_cast<int>(r.u32());
  cfg.img_channels = r.u32();
  cfg.channels = r.u32();
  cfg.blocks = static_cast<int>(r.u32());
  const bool fused = r.u8() != 0;
  cfg.act = static_cast<Activation>(r.u8());
  const std::uint8_t rep_mask = r.u8();
  cfg.rep_side1x1 = (rep_mask & 1) != 0;
  cfg.rep_identity = (rep_mask & 2) != 0;
  const std::uint8_t flags = r.u8();
  cfg.use_residual = (flags & 1) != 0;
  cfg.use_attention = (flags & 2) != 0;
  cfg.attention_trainable = (flags & 4) != 0;
  const float att_a = r.f32();
  const float att_b = r.f32();
  // sanity caps before any allocation: a corrupted header must not drive
  // init_model into a multi-gigabyte request ahead of the CRC check
  if (cfg.img_channels > 1024 || cfg.channels > 8192 || cfg.blocks > 1024) {
    throw WeightError(WeightErrorKind::kMalformed, "weight file: implausible header dimensions");
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw WeightError(WeightErrorKind::kMalformed, std::string("weight file: ") + e.what());
  }

  SpanModel<T> model = init_model<T>(cfg, 0);
  model.fused = fused;
  if (fused) {
    for (auto& blk : model.blocks)
      for (auto& conv : blk) conv = RepConv<T>{conv.main3x3, std::nullopt, false};
  }
  model.att_a[0] = static_cast<T>(att_a);
  model.att_b[0] = static_cast<T>(att_b);
  for (const auto& p : parameters(model, /*trainable_only=*/false)) {
    if (p.name == "att.a" || p.name == "att.b") continue;
    detail::read_tensor(r, p.name, *p.tensor);
  }
  const std::size_t body_end = r.pos();
  const std::uint32_t stored_crc = r.u32();
  if (detail::crc32_of(bytes.data(), body_end) != stored_crc) {
    throw WeightError(WeightErrorKind::kCrcMismatch, "weight file CRC mismatch (corrupted)");
  }
  if (consumed) *consumed = r.pos();
  return model;
}

template <typename T>
void save_weights(const SpanModel<T>& model, const std::string& path) {
  detail::write_file(path, serialize_weights(model));
}

template <typename T>
SpanModel<T> load_weights(const std::string& path) {
  return deserialize_weights<T>(detail::read_file(path));
}

// ---- checkpoint: weight file + appended optimizer section ----------------------

template <typename T>
struct Checkpoint {
  SpanModel<T> model;
  AdamState<T> adam;
  int stage = 0;
  index_t iteration = 0;
};

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::string& path) {
  std::vector<std::uint8_t> bytes = serialize_weights(ckpt.model);

  detail::ByteWriter w;
  w.raw(detail::kCheckpointMagic, 8);
  w.u32(detail::kWeightVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.stage));
  w.u64(static_cast<std::uint64_t>(ckpt.iteration));
  w.u64(static_cast<std::uint64_t>(ckpt.adam.t));
  auto& m = const_cast<SpanModel<T>&>(ckpt.model);
  const auto params = parameters(m);
  if (params.size() != ckpt.adam.m.size()) {
    throw WeightError(WeightErrorKind::kMalformed, "checkpoint: optimizer arity mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::write_tensor(w, "m." + params[i].name, ckpt.adam.m[i]);
    detail::write_tensor(w, "v." + params[i].name, ckpt.adam.v[i]);
  }
  std::vector<std::uint8_t> opt = w.bytes();
  const std::uint32_t crc = detail::crc32_of(opt.data(), opt.size());
  for (int i = 0; i < 4; ++i) opt.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  bytes.insert(bytes.end(), opt.begin(), opt.end());
  detail::write_file(path, bytes);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  Checkpoint<T> ckpt;
  std::size_t consumed = 0;
  ckpt.model = deserialize_weights<T>(bytes, &consumed);

  detail::ByteReader r(bytes.data() + consumed, bytes.size() - consumed);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw WeightError(WeightErrorKind::kBadMagic, "missing optimizer section in " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != detail::kWeightVersion) {
    throw WeightError(WeightErrorKind::kBadVersion, "unsupported checkpoint version");
  }
  ckpt.stage = static_cast<int>(r.u32());
  ckpt.iteration = static_cast<index_t>(r.u64());
  const auto t = static_cast<std::int64_t>(r.u64());
  auto params = parameters(ckpt.model);
  ckpt.adam = AdamState<T>::like(params);
  ckpt.adam.t = t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::read_tensor(r, "m." + params[i].name, ckpt.adam.m[i]);
    detail::read_tensor(r, "v." + params[i].name, ckpt.adam.v[i]);
  }
  const std::size_t opt_body = r.pos();
  const std::uint32_t stored_crc = r.u32();
  if (detail::crc32_of(bytes.data() + consumed, opt_body) != stored_crc) {
    throw WeightError(WeightErrorKind::kCrcMismatch, "checkpoint optimizer CRC mismatch");
  }
  return ckpt;
}

}  // namespace spansr
