#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace cemb::io {

// Little-endian encoding into a growing byte buffer.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

// Bounds-checked little-endian decoding; running past the end throws
// CorruptionError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}
  std::string bytes(std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> data);
void write_text(const std::filesystem::path& path, std::string_view text);
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

std::string sha256_hex(std::span<const char> data);
// First 16 hex digits of SHA-256 over the compact JSON dump (keys sorted).
std::string config_hash(const nlohmann::json& j);

// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view where);

}  // namespace cemb::io
