#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "evc/range_coder.hpp"

namespace evc {

/// Integer cumulative frequency table over symbols [min_symbol, max_symbol()],
/// optionally followed by one escape slot. Totals are exactly 2^16 and every
/// slot has count >= 1.
///
/// A symbol outside the range is coded as the escape slot followed by its
/// 32-bit two's-complement value as raw bits.
struct DiscreteCDF {
  std::int32_t min_symbol = 0;
  std::vector<std::uint32_t> cdf;  // slots + 1 entries, cdf[0] == 0, back() == 2^16
  bool has_escape = false;

  int slots() const { return static_cast<int>(cdf.size()) - 1; }
  int alphabet_size() const { return slots() - (has_escape ? 1 : 0); }
  std::int32_t max_symbol() const { return min_symbol + alphabet_size() - 1; }
  std::uint32_t count(int slot) const { return cdf[slot + 1] - cdf[slot]; }

  /// Throws ValidationError unless the invariants hold.
  void validate() const;
};

/// Integerizes probabilities to total 2^16: every slot gets 1 + floor(p * (2^16 - n)),
/// then the leftover counts go to the largest fractional parts (ties to the
/// lower index). Probabilities are normalized by their sum first.
std::vector<std::uint32_t> integerize_probabilities(std::span<const double> probs);

DiscreteCDF make_cdf(std::int32_t min_symbol, std::span<const double> probs, bool has_escape);

/// Per-symbol probabilities of N(mean, scale^2) discretized to unit bins over
/// [s_min, s_max]; the last entry is the tail mass outside the range.
std::vector<double> gaussian_symbol_probabilities(double mean, double scale, std::int32_t s_min,
                                                  std::int32_t s_max);

/// Discretized Gaussian table over [s_min, s_max] plus escape.
DiscreteCDF gaussian_cdf_table(double mean, double scale, std::int32_t s_min, std::int32_t s_max);

/// Table used by the codec for one latent element, in quantization-step units:
/// centred on round(mean) with half-width ceil(kTailSigmas * scale) + 1,
/// capped at kMaxHalfWidth.
DiscreteCDF gaussian_cdf_for_latent(double mean, double scale);

inline constexpr double kTailSigmas = 6.0;
inline constexpr int kMaxHalfWidth = 96;

void encode_symbol(RangeEncoder& enc, const DiscreteCDF& cdf, std::int32_t symbol);
std::int32_t decode_symbol(RangeDecoder& dec, const DiscreteCDF& cdf);

/// Ideal code length of `symbol` under the integer table, in bits (escape
/// symbols include their 32 raw bits).
double symbol_cost_bits(const DiscreteCDF& cdf, std::int32_t symbol);

}  // namespace evc
