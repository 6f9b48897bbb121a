#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "evc/autograd.hpp"
#include "evc/factorized_prior.hpp"

namespace evc {

/// Output widths (C1..C4) of the four backbone stages. The decoder mirrors
/// them (its first stage has width C4).
struct ChannelScheme {
  std::array<int, 4> widths{192, 192, 192, 192};

  static ChannelScheme small() { return {{64, 64, 128, 192}}; }
  static ChannelScheme medium() { return {{128, 128, 192, 192}}; }
  static ChannelScheme large() { return {{192, 192, 192, 192}}; }
  /// Looks up "small" / "medium" / "large" (or S / M / L).
  static ChannelScheme named(const std::string& name);

  /// Every width divided by `divisor` (rounded up, at least 1).
  ChannelScheme scaled(int divisor) const;
  bool fits_within(const ChannelScheme& teacher) const;
  std::string str() const;

  friend bool operator==(const ChannelScheme&, const ChannelScheme&) = default;
};

struct ModelConfig {
  ChannelScheme encoder = ChannelScheme::large();
  ChannelScheme decoder = ChannelScheme::large();
  int num_stages = 4;
  int latent_channels = 192;
  int hyper_channels = 128;
  int rate_count = 4;
  double negative_slope = 0.01;

  /// Reduced-width configuration for CPU-scale experiments: schemes and latent
  /// widths divided by `divisor`.
  static ModelConfig desk(const ChannelScheme& enc, const ChannelScheme& dec, int divisor = 16);

  int downsample() const { return 1 << num_stages; }
  /// Images must be padded to multiples of this (64 for four stages).
  int pad_unit() const { return 1 << (num_stages + 2); }
  int stage_width(bool decoder, int stage) const;
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ConvLayer {
  Var<T> weight;  // [C_out, C_in / groups, k, k]
  Var<T> bias;    // [1, C_out, 1, 1]
  ConvSpec spec;
  int shuffle = 1;  // pixel-shuffle factor applied to the output

  ConvLayer() = default;
  ConvLayer(int cin, int cout, int k, ConvSpec spec, std::mt19937_64& rng, int shuffle = 1);

  Var<T> forward(Graph<T>& g, const Var<T>& x) const;
  int in_channels() const { return weight->value.c() * spec.groups; }
  int out_channels() const { return weight->value.n(); }
  std::size_t param_count() const { return weight->value.size() + bias->value.size(); }
};

/// Where a mask sits inside a stage.
enum class MaskSite {
  kResidualInner,  // residual block, between Conv#1 and Conv#2
  kStageOutput,    // shared by the residual output and the depth-conv branch output
  kDepthInner,     // depth-conv block, between Conv#1 and the depthwise conv
  kDepthExpand,    // depth-conv block, between Conv#3 (x4 expansion) and Conv#4
};
const char* mask_site_name(MaskSite s);

/// Per-channel multiplicative mask with a channel budget.
template <typename T>
struct MaskLayer {
  Var<T> m;  // [1, N2, 1, 1], initialised to ones
  int target = 0;  // N_s
  bool frozen = false;
  int stage = 0;
  MaskSite site = MaskSite::kResidualInner;
  std::set<int> avoid;  // channels decayed with the elevated rate (AMD)
  long freeze_iteration = -1;
  std::vector<int> survivors;  // channels kept by the merge, set when frozen

  int size() const { return static_cast<int>(m->value.size()); }
  std::string label(bool decoder) const;
};

/// Residual block: Conv#1 (3x3, carries the stride) -> [mask] -> LReLU ->
/// Conv#2 (3x3); shortcut Conv#3 (1x1); sum -> [stage-output mask]. Decoder
/// blocks produce 4x channels in Conv#2/#3 and pixel-shuffle them by 2.
template <typename T>
struct ResidualBlock {
  ConvLayer<T> conv1, conv2, conv3;
  int inner_mask = -1;
  int out_mask = -1;
};

/// Depth-conv block: x + [mask](Conv#4(LReLU([mask] Conv#3(DW(LReLU([mask] Conv#1(x))))))).
template <typename T>
struct DepthConvBlock {
  ConvLayer<T> conv1, dw, conv3, conv4;
  int inner_mask = -1;
  int expand_mask = -1;
  int out_mask = -1;
};

template <typename T>
struct Stage {
  ResidualBlock<T> res;
  DepthConvBlock<T> dc;
};

/// Encoder or decoder backbone. Masks live with the network they prune.
template <typename T>
struct Network {
  bool decoder = false;
  double negative_slope = 0.01;
  std::vector<Stage<T>> stages;
  ConvLayer<T> head;  // encoder: projection to latents; decoder: 3-channel output
  std::vector<MaskLayer<T>> masks;

  Var<T> forward(Graph<T>& g, const Var<T>& x) const;
  ChannelScheme scheme() const;
  std::vector<Var<T>> params() const;
  std::vector<Var<T>> mask_params() const;
  std::size_t param_count() const;
  bool masked() const { return !masks.empty(); }

  template <typename U>
  Network<U> cast() const;
};

template <typename T>
Network<T> build_encoder(const ModelConfig& cfg, const ChannelScheme& scheme, std::mt19937_64& rng);
template <typename T>
Network<T> build_decoder(const ModelConfig& cfg, const ChannelScheme& scheme, std::mt19937_64& rng);

template <typename T>
struct HyperEncoder {
  ConvLayer<T> a, b, c;
  Var<T> forward(Graph<T>& g, const Var<T>& y, double slope) const;
};

template <typename T>
struct HyperDecoder {
  ConvLayer<T> a, b, c;
  Var<T> forward(Graph<T>& g, const Var<T>& z, double slope) const;
};

/// Two 1x1 convolutions mapping [hyper output, anchor-placed y1] to the
/// non-anchor Gaussian parameters.
template <typename T>
struct FusionNet {
  ConvLayer<T> a, b;
  Var<T> forward(Graph<T>& g, const Var<T>& hyper, const Var<T>& y1_placed, double slope) const;
};

/// Quantization steps: step[c] = q_global[rate] * q_channel[c], both stored
/// as logarithms so they stay positive.
template <typename T>
struct QuantSteps {
  Var<T> log_global;   // [1, rate_count, 1, 1]
  Var<T> log_channel;  // [1, latent_channels, 1, 1]

  double global(int rate) const;
  std::vector<double> steps(int rate) const;
  Var<T> forward(Graph<T>& g, int rate) const;
};

template <typename T>
struct GaussianParams {
  Var<T> mean;
  Var<T> scale;
};

inline constexpr double kMinScale = 1e-4;
inline constexpr double kMaxScale = 1e4;

template <typename T>
struct CodecModel {
  ModelConfig config;
  Network<T> encoder;
  Network<T> decoder;
  HyperEncoder<T> hyper_encoder;
  HyperDecoder<T> hyper_decoder;
  FusionNet<T> fusion;
  QuantSteps<T> quant;
  FactorizedPrior<T> prior;

  /// Shared entropy-side parameters (hyper nets, fusion, quant steps, prior).
  std::vector<Var<T>> entropy_params() const;
  /// Every parameter in checkpoint order (encoder, decoder, entropy side).
  std::vector<Var<T>> params() const;

  template <typename U>
  CodecModel<U> cast() const;
  /// Deep copy (fresh parameter nodes).
  CodecModel clone() const { return cast<T>(); }
};

/// Builds an EVC model; identical seeds give identical parameters.
template <typename T>
CodecModel<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ParamCounts {
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t others = 0;
  std::size_t total() const { return encoder + decoder + others; }
};
template <typename T>
ParamCounts count_params(const CodecModel<T>& model);

/// Splits y into anchor ((h+w) even) and non-anchor halves, each packed to
/// [N, C, H, W/2]. W must be even.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> spatial_split(const TensorT<T>& y);
template <typename T>
TensorT<T> spatial_merge(const TensorT<T>& y1, const TensorT<T>& y2);

/// Sets requires_grad on every parameter in `params`.
template <typename T>
void set_trainable(const std::vector<Var<T>>& params, bool trainable);

/// SHA-256 (hex) over the little-endian float32 image of `params`.
template <typename T>
std::string params_digest(const std::vector<Var<T>>& params);

}  // namespace evc
