#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "evc/bitstream.hpp"
#include "evc/codec_model.hpp"

namespace evc {

/// How the anchor half ŷ1 that conditions the second pass is formed during
/// training. kStraightThrough rounds (identity gradient); kNoisy reuses the
/// noisy relaxation, which keeps the loss smooth for finite differences.
enum class Conditioning { kStraightThrough, kNoisy };

/// Hyper decoder output for a (quantized or noisy) hyper latent.
template <typename T>
Var<T> hyper_features(Graph<T>& g, const CodecModel<T>& model, const Var<T>& z_hat);

/// Gaussian parameters from the hyper features. Pass 1 serves anchors and uses
/// the hyper features only; pass 2 serves non-anchors and also needs the
/// reconstructed latent (only its anchor positions are read).
template <typename T>
GaussianParams<T> entropy_params(Graph<T>& g, const CodecModel<T>& model, const Var<T>& hyper, int pass,
                                 const Var<T>& y1_hat = nullptr);

template <typename T>
struct RDTerms {
  Var<T> loss;        // bpp + lambda * distortion
  Var<T> bits_y;      // total -log2 likelihood of y
  Var<T> bits_z;      // same for z
  Var<T> distortion;  // MSE on the 8-bit scale
  Var<T> x_hat;
  Var<T> y;
  double pixels = 0.0;

  double bpp() const { return (bits_y->value[0] + bits_z->value[0]) / pixels; }
  double mse() const { return distortion->value[0]; }
};

/// Rate-distortion forward pass. With `noise` set this is the training
/// relaxation (additive uniform noise scaled by the step); with `noise` null
/// latents are rounded, which is what the coder sees.
template <typename T>
RDTerms<T> rd_forward(Graph<T>& g, const CodecModel<T>& model, const Network<T>& encoder, const Var<T>& x,
                      int rate_index, double lambda, std::mt19937_64* noise,
                      Conditioning cond = Conditioning::kStraightThrough);

/// Distortion weight: MSE is measured on 0..255 values so lambda values in the
/// 1e-3..1e-2 range give useful trade-offs.
inline constexpr double kDistortionScale = 255.0 * 255.0;

struct CodedSymbols {
  std::vector<std::int32_t> z, y1, y2;
  friend bool operator==(const CodedSymbols&, const CodedSymbols&) = default;
};

struct CompressResult {
  Bitstream bitstream;
  CodedSymbols symbols;
  double estimated_y_bits = 0.0;  // model likelihood of the coded y symbols
  double estimated_z_bits = 0.0;
};

/// Image is [1, 3, H, W] with values in [0, 1]; it is zero-padded to the
/// model's pad unit internally and the original size goes into the header.
CompressResult compress_detailed(const CodecModel<float>& model, const Network<float>& encoder,
                                 const Tensor& image, int rate_index);
Bitstream compress(const CodecModel<float>& model, const Tensor& image, int rate_index);

struct DecompressResult {
  Tensor image;  // cropped to the header size, clamped to [0, 1]
  CodedSymbols symbols;
};
/// Throws DecodeError on corrupt streams.
DecompressResult decompress_detailed(const CodecModel<float>& model, const Bitstream& bs);
Tensor decompress(const CodecModel<float>& model, const Bitstream& bs);

/// Symbols and their reconstruction for one latent: round(y / s) and k * s.
std::vector<std::int32_t> quantize_symbols(const Tensor& y, const std::vector<double>& steps);
Tensor dequantize_symbols(const std::vector<std::int32_t>& symbols, const Shape& shape,
                          const std::vector<double>& steps);

}  // namespace evc
