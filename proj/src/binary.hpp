#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "csvd/error.hpp"
#include "csvd/tensor_io.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

namespace csvd::detail {

class ByteWriter {
 public:
  void magic(const char (&tag)[5]) { raw(tag, 4); }

  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    raw(&value, sizeof(T));
  }

  template <typename T>
  void put_all(std::span<const T> values) {
    raw(values.data(), values.size_bytes());
  }

  void zeros(std::size_t n) { bytes_.insert(bytes_.end(), n, 0); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(const char (&tag)[5]) {
    if (bytes_.size() < 4 || std::memcmp(bytes_.data(), tag, 4) != 0)
      throw Error(ErrorCode::kBadMagic, std::string("expected magic ") + tag);
    pos_ = 4;
  }

  template <typename T>
  T get() {
    T value;
    need(sizeof(T));
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
  void get_all(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (pos_ != bytes_.size())
      throw Error(ErrorCode::kTruncatedPayload,
                  std::to_string(bytes_.size() - pos_) + " trailing bytes after payload");
  }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw Error(ErrorCode::kTruncatedPayload,
                  "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                      ", have " + std::to_string(bytes_.size() - pos_));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Fingerprint sha256(std::span<const std::uint8_t> bytes);

}  // namespace csvd::detail
