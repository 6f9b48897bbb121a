#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "evc/tensor.hpp"

namespace evc {

/// Unreadable or malformed image / data file.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);
/// Dispatches on the file signature (PNG or P6).
Image read_image(const std::filesystem::path& path);
/// Dispatches on the extension (.png, otherwise PPM).
void write_image(const std::filesystem::path& path, const Image& img);

/// [1, 3, H, W] in [0, 1].
Tensor to_tensor(const Image& img);
Image from_tensor(const Tensor& t);

}  // namespace evc
