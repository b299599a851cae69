#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "esrie/error.hpp"

namespace esrie {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

/// Append-only little-endian byte writer.
class ByteWriter {
 public:
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_i8(std::int8_t v) { buf_.push_back(static_cast<std::uint8_t>(v)); }
  void put_u16(std::uint16_t v) { put_raw(v); }
  void put_u32(std::uint32_t v) { put_raw(v); }
  void put_i32(std::int32_t v) { put_raw(v); }
  void put_f32(float v) { put_raw(v); }

  template <typename T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size_bytes());
  }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  template <typename T>
  void put_raw(T v) {
    std::uint8_t tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf_.insert(buf_.end(), tmp, tmp + sizeof(T));
  }

  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; throws TruncatedFile on overrun.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t get_u8() { return get_raw<std::uint8_t>(); }
  std::int8_t get_i8() { return get_raw<std::int8_t>(); }
  std::uint16_t get_u16() { return get_raw<std::uint16_t>(); }
  std::uint32_t get_u32() { return get_raw<std::uint32_t>(); }
  std::int32_t get_i32() { return get_raw<std::int32_t>(); }
  float get_f32() { return get_raw<float>(); }

  template <typename T>
  void get_array(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw Error(ErrorCode::TruncatedFile, "unexpected end of data");
  }
  template <typename T>
  T get_raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace esrie
