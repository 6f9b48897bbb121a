#include "evc/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cctype>
#include <fstream>

namespace evc {

// Uses the libpng simplified API, which reports errors through return codes
// instead of longjmp.
Image read_png(const std::filesystem::path& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    throw DataError(path.string() + ": " + im.message);
  }
  im.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(im.width);
  img.height = static_cast<int>(im.height);
  img.rgb.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, img.rgb.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw DataError(path.string() + ": " + msg);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw DataError("cannot write " + path.string() + ": " + im.message);
  }
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  if (ppm_token(in) != "P6") throw DataError(path.string() + " is not a binary PPM (P6)");
  Image img;
  int maxval = 0;
  try {
    img.width = std::stoi(ppm_token(in));
    img.height = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (img.width < 1 || img.height < 1 || maxval != 255) {
    throw DataError(path.string() + ": only 8-bit PPM with positive size is supported");
  }
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DataError(path.string() + ": truncated PPM");
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char head[2] = {0, 0};
  in.read(head, 2);
  in.close();
  if (head[0] == 'P' && head[1] == '6') return read_ppm(path);
  return read_png(path);
}

void write_image(const std::filesystem::path& path, const Image& img) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    write_png(path, img);
  } else {
    write_ppm(path, img);
  }
}

Tensor to_tensor(const Image& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw DataError("image buffer does not match its dimensions");
  }
  Tensor t(Shape(1, 3, img.height, img.width));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0f;
      }
  return t;
}

Image from_tensor(const Tensor& t) {
  if (t.n() != 1 || t.c() != 3) throw DimensionError("from_tensor expects [1,3,H,W], got " + t.shape().str());
  Image img;
  img.width = t.w();
  img.height = t.h();
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(t.at(0, c, y, x), 0.0f, 1.0f) * 255.0f));
      }
  return img;
}

}  // namespace evc
