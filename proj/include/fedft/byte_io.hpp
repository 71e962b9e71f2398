#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedft/error.hpp"

namespace fedft {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out_.insert(out_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::span<const std::uint8_t> bytes) {
    out_.insert(out_.end(), bytes.begin(), bytes.end());
  }

  void put_chars(std::string_view s) {
    out_.insert(out_.end(), s.begin(), s.end());
  }

  template <typename T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    out_.insert(out_.end(), p, p + values.size_bytes());
  }

 private:
  std::vector<std::uint8_t>& out_;
};

/// Bounds-checked little-endian reader. Throws ErrorT on truncation.
template <typename ErrorT>
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> in, std::string context)
      : in_(in), context_(std::move(context)) {}

  template <typename T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    require(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  void get_array(std::span<T> dst) {
    require(dst.size_bytes());
    std::memcpy(dst.data(), in_.data() + pos_, dst.size_bytes());
    pos_ += dst.size_bytes();
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (n > in_.size() - pos_) {
      throw ErrorT(context_ + ": truncated input (need " + std::to_string(n) +
                   " bytes at offset " + std::to_string(pos_) + ", have " +
                   std::to_string(in_.size() - pos_) + ")");
    }
  }

  std::span<const std::uint8_t> in_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace fedft
