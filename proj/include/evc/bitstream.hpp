#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace evc {

inline constexpr std::uint8_t kBitstreamVersion = 1;
/// Version 2 carries a one-byte encoder id after the height field.
inline constexpr std::uint8_t kBitstreamVersionEnsemble = 2;

struct Bitstream {
  std::uint8_t rate_index = 0;
  std::uint16_t width = 0;   // before padding
  std::uint16_t height = 0;  // before padding
  std::optional<std::uint8_t> encoder_id;
  std::vector<std::uint8_t> z, y1, y2;

  std::size_t byte_size() const;
};

std::vector<std::uint8_t> serialize(const Bitstream& bs);
/// Throws DecodeError (with the failing byte offset) on malformed input.
Bitstream parse_bitstream(std::span<const std::uint8_t> bytes);

/// Byte offsets of the three sub-streams inside a serialized bitstream.
struct StreamOffsets {
  std::size_t z = 0, y1 = 0, y2 = 0;
};
StreamOffsets stream_offsets(const Bitstream& bs);

}  // namespace evc
