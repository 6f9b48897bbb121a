#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evc {

/// Corrupt or truncated compressed data. `offset` is the byte position in the
/// stream (or container) where decoding failed.
class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

inline constexpr int kProbabilityBits = 16;
inline constexpr std::uint32_t kProbabilityTotal = 1u << kProbabilityBits;
inline constexpr std::uint32_t kRangeTop = 1u << 24;

// Carry-propagating range coder with byte renormalization: 33-bit low in a
// 64-bit register, pending 0xFF run tracked by cache/cache_size. The first
// emitted byte is always zero. All arithmetic is integer.
class RangeEncoder {
 public:
  /// Codes the sub-interval [start, start + freq) of [0, 2^16).
  void encode(std::uint32_t start, std::uint32_t freq);
  /// Codes `nbits` (<= 16) raw bits at uniform probability.
  void encode_bits(std::uint32_t value, int nbits);
  std::vector<std::uint8_t> finish();

  std::uint32_t range() const { return range_; }
  std::size_t bytes_so_far() const { return out_.size(); }

 private:
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  std::vector<std::uint8_t> out_;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  /// `base_offset` is added to error offsets so diagnostics point into the
  /// enclosing container.
  explicit RangeDecoder(std::span<const std::uint8_t> data, std::size_t base_offset = 0);

  /// Cumulative frequency of the next symbol; call consume() afterwards.
  std::uint32_t threshold();
  void consume(std::uint32_t start, std::uint32_t freq);
  std::uint32_t decode_bits(int nbits);

  std::uint32_t range() const { return range_; }
  std::size_t position() const { return pos_; }

 private:
  std::uint8_t next_byte();

  std::span<const std::uint8_t> data_;
  std::size_t base_offset_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

}  // namespace evc
