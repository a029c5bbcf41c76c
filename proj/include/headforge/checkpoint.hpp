// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "headforge/error.hpp"
#include "headforge/image.hpp"

namespace headforge {

/// Binary container:
///   "HSCK" | u32 version | u32 blob count | blobs... | u32 crc32(all preceding bytes)
/// blob: u32 name length | name | u8 dtype | u32 ndim | u64 dims[ndim] | u64 byte length | payload
/// Integers and f32 payloads are little-endian.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;
  enum class DType : std::uint8_t { F32 = 1, Bytes = 2 };

  struct Blob {
    std::string name;
    DType dtype = DType::Bytes;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> payload;
  };

  void put_f32(const std::string& name, std::span<const float> values, std::vector<std::uint64_t> shape = {}) {
    if (shape.empty()) shape = {values.size()};
    std::uint64_t count = 1;
    for (auto d : shape) count *= d;
    if (count != values.size()) throw ShapeError("checkpoint blob '" + name + "': shape does not match data");
    Blob b{name, DType::F32, std::move(shape), {}};
    b.payload.resize(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int k = 0; k < 4; ++k) b.payload[i * 4 + k] = static_cast<std::uint8_t>(bits >> (8 * k));
    }
    put(std::move(b));
  }

  void put_bytes(const std::string& name, std::string_view bytes) {
    Blob b{name, DType::Bytes, {bytes.size()}, std::vector<std::uint8_t>(bytes.begin(), bytes.end())};
    put(std::move(b));
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  std::vector<float> get_f32(const std::string& name) const {
    const Blob& b = require(name, DType::F32);
    std::vector<float> out(b.payload.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= std::uint32_t(b.payload[i * 4 + k]) << (8 * k);
      out[i] = std::bit_cast<float>(bits);
    }
    return out;
  }

  std::string get_bytes(const std::string& name) const {
    const Blob& b = require(name, DType::Bytes);
    return std::string(b.payload.begin(), b.payload.end());
  }

  const std::vector<std::uint64_t>& shape(const std::string& name) const {
    const Blob* b = find(name);
    if (!b) throw ValidationError("checkpoint has no blob '" + name + "'");
    return b->shape;
  }

  const std::vector<Blob>& blobs() const { return blobs_; }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out = {'H', 'S', 'C', 'K'};
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(blobs_.size()));
    for (const auto& b : blobs_) {
      put_u32(out, static_cast<std::uint32_t>(b.name.size()));
      out.insert(out.end(), b.name.begin(), b.name.end());
      out.push_back(static_cast<std::uint8_t>(b.dtype));
      put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
      for (auto d : b.shape) put_u64(out, d);
      put_u64(out, b.payload.size());
      out.insert(out.end(), b.payload.begin(), b.payload.end());
    }
    put_u32(out, crc(out));
    return out;
  }

  static Checkpoint deserialize(std::span<const std::uint8_t> in) {
    if (in.size() < 16 || std::memcmp(in.data(), "HSCK", 4) != 0)
      throw IntegrityError("not a checkpoint (bad magic or too short)");
    const std::uint32_t version = get_u32(in, 4);
    if (version != kVersion)
      throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kVersion) + ")");
    const std::uint32_t stored = get_u32(in, in.size() - 4);
    if (crc(in.first(in.size() - 4)) != stored) throw IntegrityError("checkpoint checksum mismatch (truncated or corrupt)");
    Checkpoint ck;
    std::size_t pos = 8;
    const std::size_t end = in.size() - 4;
    auto need = [&](std::size_t n) {
      if (n > end - pos) throw IntegrityError("checkpoint truncated");
    };
    need(4);
    const std::uint32_t count = get_u32(in, pos);
    pos += 4;
    for (std::uint32_t i = 0; i < count; ++i) {
      Blob b;
      need(4);
      const auto name_len = get_u32(in, pos);
      pos += 4;
      need(name_len + 5);
      b.name.assign(reinterpret_cast<const char*>(in.data() + pos), name_len);
      pos += name_len;
      b.dtype = static_cast<DType>(in[pos++]);
      if (b.dtype != DType::F32 && b.dtype != DType::Bytes) throw IntegrityError("unknown blob dtype");
      const auto ndim = get_u32(in, pos);
      pos += 4;
      need(std::size_t(ndim) * 8 + 8);
      for (std::uint32_t d = 0; d < ndim; ++d, pos += 8) b.shape.push_back(get_u64(in, pos));
      const auto len = get_u64(in, pos);
      pos += 8;
      need(len);
      b.payload.assign(in.begin() + pos, in.begin() + pos + len);
      pos += len;
      ck.blobs_.push_back(std::move(b));
    }
    if (pos != end) throw IntegrityError("trailing bytes in checkpoint");
    return ck;
  }

  /// Writes to a sibling temp file and renames it into place.
  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    auto tmp = path;
    tmp += ".tmp";
    write_bytes(tmp, bytes);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  }

  static Checkpoint load(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

 private:
  void put(Blob b) {
    for (auto& existing : blobs_)
      if (existing.name == b.name) {
        existing = std::move(b);
        return;
      }
    blobs_.push_back(std::move(b));
  }
  const Blob* find(const std::string& name) const {
    for (const auto& b : blobs_)
      if (b.name == name) return &b;
    return nullptr;
  }
  const Blob& require(const std::string& name, DType t) const {
    const Blob* b = find(name);
    if (!b) throw ValidationError("checkpoint has no blob '" + name + "'");
    if (b->dtype != t) throw ValidationError("checkpoint blob '" + name + "' has the wrong dtype");
    return *b;
  }
  static void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) o.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  static void put_u64(std::vector<std::uint8_t>& o, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) o.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  static std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t(in[at + k]) << (8 * k);
    return v;
  }
  static std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t(in[at + k]) << (8 * k);
    return v;
  }
  static std::uint32_t crc(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < bytes.size()) {
      const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
      c = crc32(c, bytes.data() + done, chunk);
      done += chunk;
    }
    return static_cast<std::uint32_t>(c);
  }

  std::vector<Blob> blobs_;
};

}  // namespace headforge
