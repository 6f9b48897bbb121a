#include "evc/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evc/cdf.hpp"
#include "evc/metrics.hpp"
#include "evc/numeric.hpp"
#include "evc/range_coder.hpp"

namespace evc {

template <typename T>
Var<T> hyper_features(Graph<T>& g, const CodecModel<T>& model, const Var<T>& z_hat) {
  return model.hyper_decoder.forward(g, z_hat, model.config.negative_slope);
}

template <typename T>
GaussianParams<T> entropy_params(Graph<T>& g, const CodecModel<T>& model, const Var<T>& hyper, int pass,
                                 const Var<T>& y1_hat) {
  const int C = model.config.latent_channels;
  if (hyper->value.c() != 2 * C) throw DimensionError("entropy_params: hyper features must have 2C channels");
  Var<T> raw;
  if (pass == 1) {
    raw = hyper;
  } else if (pass == 2) {
    if (!y1_hat) throw SequencingError("entropy_params: pass 2 needs the reconstructed anchor latents");
    raw = model.fusion.forward(g, hyper, g.anchor_only(y1_hat), model.config.negative_slope);
  } else {
    throw ValidationError("entropy_params: pass must be 1 or 2");
  }
  GaussianParams<T> p;
  p.mean = g.slice_channels(raw, 0, C);
  p.scale = g.exp_clamped(g.slice_channels(raw, C, C), static_cast<T>(kMinScale), static_cast<T>(kMaxScale));
  return p;
}

namespace {

template <typename T>
TensorT<T> uniform_noise(const Shape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  TensorT<T> t(s);
  for (auto& e : t.values()) e = static_cast<T>(u(rng));
  return t;
}

}  // namespace

template <typename T>
RDTerms<T> rd_forward(Graph<T>& g, const CodecModel<T>& model, const Network<T>& encoder, const Var<T>& x,
                      int rate_index, double lambda, std::mt19937_64* noise, Conditioning cond) {
  const double slope = model.config.negative_slope;
  RDTerms<T> out;
  out.y = encoder.forward(g, x);
  auto steps = model.quant.forward(g, rate_index);
  auto z = model.hyper_encoder.forward(g, out.y, slope);

  Var<T> z_hat, y_tilde, y_cond;
  if (noise) {
    z_hat = g.add(z, g.constant(uniform_noise<T>(z->value.shape(), *noise)));
    y_tilde = g.add(out.y, g.channel_scale(g.constant(uniform_noise<T>(out.y->value.shape(), *noise)), steps));
    y_cond = cond == Conditioning::kNoisy ? y_tilde : g.ste_quantize(out.y, steps);
  } else {
    TensorT<T> ones(Shape(1, z->value.c(), 1, 1), T(1));
    z_hat = g.ste_quantize(z, g.constant(std::move(ones)));
    y_tilde = g.ste_quantize(out.y, steps);
    y_cond = y_tilde;
  }

  auto hyper = hyper_features(g, model, z_hat);
  auto p1 = entropy_params(g, model, hyper, 1);
  auto p2 = entropy_params(g, model, hyper, 2, y_cond);
  auto mean = g.checker_select(p1.mean, p2.mean);
  auto scale = g.checker_select(p1.scale, p2.scale);

  out.bits_y = g.gaussian_rate(y_tilde, mean, scale, steps);
  out.bits_z = model.prior.rate(g, z_hat);
  out.x_hat = model.decoder.forward(g, y_tilde);
  out.distortion = g.scale(g.mse(out.x_hat, x), static_cast<T>(kDistortionScale));

  const Shape& xs = x->value.shape();
  out.pixels = static_cast<double>(xs.n()) * xs.h() * xs.w();
  auto rate = g.scale(g.add(out.bits_y, out.bits_z), static_cast<T>(1.0 / out.pixels));
  out.loss = lambda == 0.0 ? rate : g.add(rate, g.scale(out.distortion, static_cast<T>(lambda)));
  return out;
}

std::vector<std::int32_t> quantize_symbols(const Tensor& y, const std::vector<double>& steps) {
  const Shape& s = y.shape();
  if (static_cast<int>(steps.size()) != s.c()) throw DimensionError("quantize_symbols: steps length != channels");
  const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
  std::vector<std::int32_t> out(y.size());
  constexpr double lim = 1 << 30;
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c) {
      const float st = static_cast<float>(steps[c]);
      if (!(st > 0.0f)) throw ValidationError("quantization step must be positive");
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c() + c) * plane + i;
        const double q = round_half_away(static_cast<double>(y[k] / st));
        if (!std::isfinite(q)) throw ValidationError("non-finite latent value");
        out[k] = static_cast<std::int32_t>(std::clamp(q, -lim, lim));
      }
    }
  return out;
}

Tensor dequantize_symbols(const std::vector<std::int32_t>& symbols, const Shape& shape,
                          const std::vector<double>& steps) {
  if (symbols.size() != shape.numel()) throw DimensionError("dequantize_symbols: symbol count mismatch");
  Tensor t(shape);
  const std::size_t plane = static_cast<std::size_t>(shape.h()) * shape.w();
  for (int n = 0; n < shape.n(); ++n)
    for (int c = 0; c < shape.c(); ++c) {
      const float st = static_cast<float>(steps[c]);
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * shape.c() + c) * plane + i;
        t[k] = static_cast<float>(symbols[k]) * st;
      }
    }
  return t;
}

namespace {

// Latent shapes implied by a padded image size.
struct LatentGeometry {
  Shape y, y_half, z;
};

LatentGeometry geometry(const ModelConfig& cfg, int padded_w, int padded_h) {
  const int d = cfg.downsample();
  LatentGeometry g;
  g.y = Shape(1, cfg.latent_channels, padded_h / d, padded_w / d);
  g.y_half = Shape(1, cfg.latent_channels, padded_h / d, padded_w / d / 2);
  g.z = Shape(1, cfg.hyper_channels, padded_h / d / 4, padded_w / d / 4);
  return g;
}

// Packs the checkerboard half of a full-size tensor (anchor or non-anchor).
Tensor half_of(const Tensor& full, bool anchor) {
  auto parts = spatial_split(full);
  return anchor ? std::move(parts.first) : std::move(parts.second);
}

std::vector<std::int32_t> half_symbols(const std::vector<std::int32_t>& full, const Shape& s, bool anchor) {
  std::vector<std::int32_t> out;
  out.reserve(full.size() / 2);
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w) {
          if (((h + w) % 2 == 0) == anchor) out.push_back(full[((static_cast<std::size_t>(n) * s.c() + c) * s.h() + h) * s.w() + w]);
        }
  return out;
}

std::vector<std::int32_t> merge_symbols(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b,
                                        const Shape& s) {
  std::vector<std::int32_t> out(s.numel());
  std::size_t ia = 0, ib = 0;
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w) {
          out[((static_cast<std::size_t>(n) * s.c() + c) * s.h() + h) * s.w() + w] =
              ((h + w) % 2 == 0) ? a[ia++] : b[ib++];
        }
  return out;
}

// Per-latent tables in step units, in packed [C, H, W/2] order.
struct HalfTables {
  std::vector<double> mean, scale;  // already divided by the channel step
};

HalfTables half_tables(const GaussianParams<float>& p, const std::vector<double>& steps, bool anchor) {
  const Tensor m = half_of(p.mean->value, anchor);
  const Tensor s = half_of(p.scale->value, anchor);
  HalfTables t;
  t.mean.resize(m.size());
  t.scale.resize(m.size());
  const std::size_t plane = static_cast<std::size_t>(m.h()) * m.w();
  for (int c = 0; c < m.c(); ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = static_cast<std::size_t>(c) * plane + i;
      t.mean[k] = static_cast<double>(m[k]) / steps[c];
      t.scale[k] = static_cast<double>(s[k]) / steps[c];
    }
  return t;
}

std::vector<std::uint8_t> encode_half(const HalfTables& t, const std::vector<std::int32_t>& symbols,
                                      double& est_bits) {
  RangeEncoder enc;
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    encode_symbol(enc, gaussian_cdf_for_latent(t.mean[k], t.scale[k]), symbols[k]);
    est_bits -= std::log2(std::max(gaussian_bin_mass(symbols[k], t.mean[k], t.scale[k], 1.0), kLikelihoodFloor));
  }
  return enc.finish();
}

std::vector<std::int32_t> decode_half(const HalfTables& t, std::span<const std::uint8_t> bytes,
                                      std::size_t base_offset) {
  RangeDecoder dec(bytes, base_offset);
  std::vector<std::int32_t> out(t.mean.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = decode_symbol(dec, gaussian_cdf_for_latent(t.mean[k], t.scale[k]));
  return out;
}

Tensor z_tensor(const std::vector<std::int32_t>& sym, const Shape& s) {
  Tensor t(s);
  for (std::size_t i = 0; i < sym.size(); ++i) t[i] = static_cast<float>(sym[i]);
  return t;
}

}  // namespace

CompressResult compress_detailed(const CodecModel<float>& model, const Network<float>& encoder,
                                 const Tensor& image, int rate_index) {
  const ModelConfig& cfg = model.config;
  if (image.n() != 1 || image.c() != 3) throw DimensionError("compress expects a [1,3,H,W] image, got " + image.shape().str());
  if (image.w() < 1 || image.h() < 1 || image.w() > 65535 || image.h() > 65535) {
    throw ValidationError("image dimensions must be in [1, 65535]");
  }
  if (rate_index < 0 || rate_index >= cfg.rate_count) {
    throw ValidationError("rate_index " + std::to_string(rate_index) + " outside [0," + std::to_string(cfg.rate_count) + ")");
  }
  const Tensor padded = pad_to_multiple(image, cfg.pad_unit());
  const LatentGeometry geo = geometry(cfg, padded.w(), padded.h());
  const double slope = cfg.negative_slope;

  Graph<float> g(false);
  auto y = encoder.forward(g, g.constant(padded));
  auto z = model.hyper_encoder.forward(g, y, slope);
  require_same_shape(y->value.shape(), geo.y, "compress: latent");

  CompressResult r;
  r.symbols.z = quantize_symbols(z->value, std::vector<double>(z->value.c(), 1.0));
  const Tensor z_hat = z_tensor(r.symbols.z, geo.z);
  const int plane_z = geo.z.h() * geo.z.w();
  r.bitstream.z = encode_hyper_latent(model.prior, r.symbols.z, cfg.hyper_channels, plane_z);
  {
    Graph<double> gd(false);
    r.estimated_z_bits = model.prior.cast<double>().rate(gd, gd.constant(z_hat.cast<double>()))->value[0];
  }

  const auto steps = model.quant.steps(rate_index);
  const auto y_sym = quantize_symbols(y->value, steps);
  const Tensor y_hat = dequantize_symbols(y_sym, geo.y, steps);

  auto hyper = hyper_features(g, model, g.constant(z_hat));
  auto p1 = entropy_params(g, model, hyper, 1);
  auto p2 = entropy_params(g, model, hyper, 2, g.constant(y_hat));

  r.symbols.y1 = half_symbols(y_sym, geo.y, true);
  r.symbols.y2 = half_symbols(y_sym, geo.y, false);
  r.bitstream.y1 = encode_half(half_tables(p1, steps, true), r.symbols.y1, r.estimated_y_bits);
  r.bitstream.y2 = encode_half(half_tables(p2, steps, false), r.symbols.y2, r.estimated_y_bits);

  r.bitstream.rate_index = static_cast<std::uint8_t>(rate_index);
  r.bitstream.width = static_cast<std::uint16_t>(image.w());
  r.bitstream.height = static_cast<std::uint16_t>(image.h());
  return r;
}

Bitstream compress(const CodecModel<float>& model, const Tensor& image, int rate_index) {
  return compress_detailed(model, model.encoder, image, rate_index).bitstream;
}

DecompressResult decompress_detailed(const CodecModel<float>& model, const Bitstream& bs) {
  const ModelConfig& cfg = model.config;
  if (bs.rate_index >= cfg.rate_count) {
    throw DecodeError("rate index " + std::to_string(bs.rate_index) + " not served by this model", 5);
  }
  if (bs.width == 0 || bs.height == 0) throw DecodeError("zero image dimension in header", 6);
  const auto padded = padded_size(bs.width, bs.height, cfg.pad_unit());
  const LatentGeometry geo = geometry(cfg, padded.first, padded.second);
  const StreamOffsets off = stream_offsets(bs);

  DecompressResult r;
  r.symbols.z = decode_hyper_latent(model.prior, bs.z, cfg.hyper_channels, geo.z.h() * geo.z.w(), off.z);
  const Tensor z_hat = z_tensor(r.symbols.z, geo.z);
  const auto steps = model.quant.steps(bs.rate_index);

  Graph<float> g(false);
  auto hyper = hyper_features(g, model, g.constant(z_hat));
  auto p1 = entropy_params(g, model, hyper, 1);
  r.symbols.y1 = decode_half(half_tables(p1, steps, true), bs.y1, off.y1);

  // Non-anchor positions are zero here; pass 2 reads anchors only.
  std::vector<std::int32_t> zeros(r.symbols.y1.size(), 0);
  const Tensor y1_hat = dequantize_symbols(merge_symbols(r.symbols.y1, zeros, geo.y), geo.y, steps);
  auto p2 = entropy_params(g, model, hyper, 2, g.constant(y1_hat));
  r.symbols.y2 = decode_half(half_tables(p2, steps, false), bs.y2, off.y2);

  const Tensor y_hat = dequantize_symbols(merge_symbols(r.symbols.y1, r.symbols.y2, geo.y), geo.y, steps);
  auto x_hat = model.decoder.forward(g, g.constant(y_hat));
  Tensor img = crop(x_hat->value, bs.width, bs.height);
  for (auto& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
  r.image = std::move(img);
  return r;
}

Tensor decompress(const CodecModel<float>& model, const Bitstream& bs) {
  return decompress_detailed(model, bs).image;
}

#define EVC_INSTANTIATE(T)                                                                                   \
  template Var<T> hyper_features(Graph<T>&, const CodecModel<T>&, const Var<T>&);                            \
  template GaussianParams<T> entropy_params(Graph<T>&, const CodecModel<T>&, const Var<T>&, int,             \
                                            const Var<T>&);                                                  \
  template RDTerms<T> rd_forward(Graph<T>&, const CodecModel<T>&, const Network<T>&, const Var<T>&, int,     \
                                 double, std::mt19937_64*, Conditioning);

EVC_INSTANTIATE(float)
EVC_INSTANTIATE(double)
EVC_INSTANTIATE(long double)
#undef EVC_INSTANTIATE

}  // namespace evc
