#include "evc/bitstream.hpp"

#include <cstring>
#include <string>

#include "evc/range_coder.hpp"

namespace evc {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'C', '1'};

std::size_t header_size(const Bitstream& bs) { return 10 + (bs.encoder_id ? 1 : 0); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw DecodeError(std::string("truncated bitstream while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = bytes_[pos_] | (bytes_[pos_ + 1] << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::vector<std::uint8_t> blob(const char* what) {
    const std::size_t at = pos_;
    const std::uint32_t len = u32(what);
    if (bytes_.size() - pos_ < len) {
      throw DecodeError(std::string(what) + " length " + std::to_string(len) + " exceeds remaining " +
                            std::to_string(bytes_.size() - pos_) + " bytes",
                        at);
    }
    std::vector<std::uint8_t> out(bytes_.begin() + pos_, bytes_.begin() + pos_ + len);
    pos_ += len;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t Bitstream::byte_size() const { return header_size(*this) + 12 + z.size() + y1.size() + y2.size(); }

std::vector<std::uint8_t> serialize(const Bitstream& bs) {
  std::vector<std::uint8_t> out;
  out.reserve(bs.byte_size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(bs.encoder_id ? kBitstreamVersionEnsemble : kBitstreamVersion);
  out.push_back(bs.rate_index);
  put_u16(out, bs.width);
  put_u16(out, bs.height);
  if (bs.encoder_id) out.push_back(*bs.encoder_id);
  for (const auto* s : {&bs.z, &bs.y1, &bs.y2}) {
    put_u32(out, static_cast<std::uint32_t>(s->size()));
    out.insert(out.end(), s->begin(), s->end());
  }
  return out;
}

Bitstream parse_bitstream(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw DecodeError("bad magic (expected EVC1)", 0);
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const std::size_t vpos = r.pos();
  const std::uint8_t version = r.u8("version");
  if (version != kBitstreamVersion && version != kBitstreamVersionEnsemble) {
    throw DecodeError("unsupported bitstream version " + std::to_string(version), vpos);
  }
  Bitstream bs;
  bs.rate_index = r.u8("rate index");
  bs.width = r.u16("width");
  bs.height = r.u16("height");
  if (bs.width == 0 || bs.height == 0) throw DecodeError("zero image dimension in header", 6);
  if (version == kBitstreamVersionEnsemble) bs.encoder_id = r.u8("encoder id");
  bs.z = r.blob("z stream");
  bs.y1 = r.blob("y1 stream");
  bs.y2 = r.blob("y2 stream");
  if (r.pos() != bytes.size()) {
    throw DecodeError(std::to_string(bytes.size() - r.pos()) + " trailing bytes after y2 stream", r.pos());
  }
  return bs;
}

StreamOffsets stream_offsets(const Bitstream& bs) {
  StreamOffsets o;
  o.z = header_size(bs) + 4;
  o.y1 = o.z + bs.z.size() + 4;
  o.y2 = o.y1 + bs.y1.size() + 4;
  return o;
}

}  // namespace evc
