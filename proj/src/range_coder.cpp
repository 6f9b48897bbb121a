#include "evc/range_coder.hpp"

#include "evc/tensor.hpp"

namespace evc {

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      out_.push_back(static_cast<std::uint8_t>(temp + carry));
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(static_cast<std::uint32_t>(low_) >> 24);
  }
  ++cache_size_;
  low_ = static_cast<std::uint64_t>(static_cast<std::uint32_t>(low_) << 8);
}

void RangeEncoder::encode(std::uint32_t start, std::uint32_t freq) {
  if (finished_) throw SequencingError("RangeEncoder: encode after finish");
  if (freq == 0 || start + freq > kProbabilityTotal) {
    throw ValidationError("RangeEncoder: interval [" + std::to_string(start) + "," +
                          std::to_string(start + freq) + ") outside [0,65536)");
  }
  const std::uint32_t r = range_ >> kProbabilityBits;
  low_ += static_cast<std::uint64_t>(r) * start;
  range_ = r * freq;
  while (range_ < kRangeTop) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode_bits(std::uint32_t value, int nbits) {
  if (nbits < 1 || nbits > kProbabilityBits) throw ValidationError("encode_bits: 1..16 bits");
  const std::uint32_t shift = kProbabilityBits - nbits;
  encode((value & ((1u << nbits) - 1)) << shift, 1u << shift);
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  if (!finished_) {
    for (int i = 0; i < 5; ++i) shift_low();
    finished_ = true;
  }
  return out_;
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> data, std::size_t base_offset)
    : data_(data), base_offset_(base_offset) {
  if (data_.size() < 5) {
    throw DecodeError("range stream shorter than 5 bytes", base_offset_ + data_.size());
  }
  if (data_[0] != 0) throw DecodeError("range stream must start with a zero byte", base_offset_);
  for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= data_.size()) {
    throw DecodeError("range stream truncated", base_offset_ + pos_);
  }
  return data_[pos_++];
}

std::uint32_t RangeDecoder::threshold() {
  range_ >>= kProbabilityBits;
  const std::uint32_t f = code_ / range_;
  if (f >= kProbabilityTotal) {
    throw DecodeError("decoded frequency " + std::to_string(f) + " outside table", base_offset_ + pos_);
  }
  return f;
}

void RangeDecoder::consume(std::uint32_t start, std::uint32_t freq) {
  code_ -= start * range_;
  range_ *= freq;
  while (range_ < kRangeTop) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

std::uint32_t RangeDecoder::decode_bits(int nbits) {
  if (nbits < 1 || nbits > kProbabilityBits) throw ValidationError("decode_bits: 1..16 bits");
  const std::uint32_t shift = kProbabilityBits - nbits;
  const std::uint32_t f = threshold() >> shift;
  consume(f << shift, 1u << shift);
  return f;
}

}  // namespace evc
