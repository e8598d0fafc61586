// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, little-endian throughout:
//
//   "BTRN"                      magic, 4 bytes
//   u32 format version
//   config block:  u64 vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len
//                  f64 norm_eps, f64 rope_base
//   u32 tensor count
//   per tensor:    u32 name length, UTF-8 name, u32 rank, u64 dims[rank],
//                  f32 payload[product(dims)]
//   u32 CRC-32 of every byte after the magic and before the CRC
//
// Adapter sidecars use the same container with "lora."-prefixed names.

#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/lora.hpp"
#include "btrans/model.hpp"

namespace btrans {

inline constexpr char kCheckpointMagic[4] = {'B', 'T', 'R', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    buf_.insert(buf_.end(), raw, raw + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, p_ + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }
  const unsigned char* take(std::size_t n) {
    need(n);
    const auto* p = p_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > n_ - pos_) throw CorruptionError("checkpoint: truncated payload");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path, const ModelConfig& cfg,
                            const std::vector<TensorRecord>& records) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  for (std::uint64_t v : {cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff,
                          cfg.max_seq_len})
    w.put<std::uint64_t>(v);
  w.put<double>(cfg.norm_eps);
  w.put<double>(cfg.rope_base);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (shape_numel(r.shape) != r.values.size())
      throw DimensionError("checkpoint: record '" + r.name + "' shape does not match its values");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(r.name.data(), r.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.put<std::uint64_t>(d);
    for (float v : r.values) w.put<float>(v);
  }
  auto& bytes = w.bytes();
  const auto crc = detail::crc32_of(bytes.data() + 4, bytes.size() - 4);
  w.put<std::uint32_t>(crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct Container {
  ModelConfig config;
  std::vector<TensorRecord> records;
};

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CorruptionError("checkpoint: bad magic in " + path.string());
  if (bytes.size() < 4 + 4 + 4) throw CorruptionError("checkpoint: truncated payload");

  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  if (r.get<std::uint32_t>() != kCheckpointVersion)
    throw CorruptionError("checkpoint: unsupported format version");
  Container c;
  c.config.vocab_size = r.get<std::uint64_t>();
  c.config.d_model = r.get<std::uint64_t>();
  c.config.n_layers = r.get<std::uint64_t>();
  c.config.n_heads = r.get<std::uint64_t>();
  c.config.d_ff = r.get<std::uint64_t>();
  c.config.max_seq_len = r.get<std::uint64_t>();
  c.config.norm_eps = r.get<double>();
  c.config.rope_base = r.get<double>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    const auto name_len = r.get<std::uint32_t>();
    const auto* name = r.take(name_len);
    rec.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CorruptionError("checkpoint: implausible rank for '" + rec.name + "'");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto dim = r.get<std::uint64_t>();
      if (dim == 0 || dim > (1ULL << 32)) throw CorruptionError("checkpoint: implausible dimension");
      rec.shape.push_back(static_cast<std::size_t>(dim));
      n *= static_cast<std::size_t>(dim);
    }
    if (n > r.remaining() / sizeof(float)) throw CorruptionError("checkpoint: truncated payload");
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.get<float>();
    c.records.push_back(std::move(rec));
  }
  const std::size_t body_end = bytes.size() - r.remaining();
  const auto stored = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw CorruptionError("checkpoint: trailing bytes after checksum");
  if (detail::crc32_of(bytes.data() + 4, body_end - 4) != stored)
    throw CorruptionError("checkpoint: checksum mismatch in " + path.string());
  return c;
}

template <typename T>
std::vector<TensorRecord> to_records(const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  std::vector<TensorRecord> out;
  for (const auto& [name, t] : named) {
    TensorRecord r{name, t.shape(), {}};
    r.values.reserve(t.numel());
    for (T v : t.data()) r.values.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  write_container(path, params.config, to_records(params.named()));
}

namespace detail {

template <typename T>
void fill_from(const std::map<std::string, const TensorRecord*>& by_name, const std::string& name,
               Tensor<T>& dst) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw CorruptionError("checkpoint: missing tensor '" + name + "'");
  if (it->second->shape != dst.shape())
    throw CorruptionError("checkpoint: shape mismatch for '" + name + "': file " +
                          shape_str(it->second->shape) + ", expected " + shape_str(dst.shape()));
  auto out = dst.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(it->second->values[i]);
}

}  // namespace detail

template <typename T = float>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  auto c = read_container(path);
  try {
    c.config.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint: invalid config block: ") + e.what());
  }
  auto params = init_model<T>(c.config, 0);
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : c.records) by_name[r.name] = &r;
  auto named = params.named();
  if (by_name.size() != named.size())
    throw CorruptionError("checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                          std::to_string(by_name.size()));
  for (auto& [name, t] : named) detail::fill_from(by_name, name, t);
  return params;
}

/// Adapter sidecar; `extra` records (e.g. optimizer moments) are appended as-is.
template <typename T>
void save_adapter(const LoraAdapter<T>& adapter, const ModelConfig& cfg,
                  const std::filesystem::path& path, std::vector<TensorRecord> extra = {}) {
  auto records = to_records(adapter.named());
  records.push_back({"lora.meta.alpha", {1}, {static_cast<float>(adapter.alpha)}});
  for (auto& r : extra) records.push_back(std::move(r));
  write_container(path, cfg, records);
}

template <typename T = float>
LoraAdapter<T> load_adapter(const std::filesystem::path& path, const ModelConfig& expected,
                            std::vector<TensorRecord>* extra = nullptr) {
  auto c = read_container(path);
  if (!(c.config == expected)) throw CorruptionError("adapter: model config does not match the base model");
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : c.records) by_name[r.name] = &r;
  auto alpha = by_name.find("lora.meta.alpha");
  auto first = by_name.find("lora.blocks.0.q.down");
  if (alpha == by_name.end() || first == by_name.end())
    throw CorruptionError("adapter: missing lora metadata");
  auto adapter = LoraAdapter<T>::create(c.config, first->second->shape.at(1), alpha->second->values.at(0), 0);
  for (auto& [name, t] : adapter.named()) detail::fill_from(by_name, name, t);
  if (extra) {
    std::map<std::string, bool> known;
    for (auto& [name, t] : adapter.named()) known[name] = true;
    known["lora.meta.alpha"] = true;
    for (const auto& r : c.records)
      if (!known.count(r.name)) extra->push_back(r);
  }
  return adapter;
}

}  // namespace btrans
