#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "evc/codec_model.hpp"
#include "evc/image_io.hpp"

namespace evc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian byte sink and cursor shared by the model and bank formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void str(const std::string& s);
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  std::span<const std::uint8_t> take(std::size_t n);
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_config(ByteWriter& w, const ModelConfig& cfg);
ModelConfig read_config(ByteReader& r);

/// Blob list: u32 count, then per tensor four u32 extents, a u32 element
/// count and that many float32 values.
template <typename T>
void write_blobs(ByteWriter& w, const std::vector<Var<T>>& params);
/// Overwrites `params` in place; each tensor takes the stored shape.
template <typename T>
void read_blobs(ByteReader& r, const std::vector<Var<T>>& params);

/// Re-derives depthwise group counts from stored weight shapes.
template <typename T>
void repair_groups(Network<T>& net);

/// "EVCK", u32 version, config, blobs in CodecModel::params order. Masked
/// models must be merged first.
template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const CodecModel<T>& model);
template <typename T>
CodecModel<T> parse_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const CodecModel<T>& model, const std::filesystem::path& path);
template <typename T>
CodecModel<T> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace evc
