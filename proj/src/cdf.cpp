#include "evc/cdf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evc/numeric.hpp"
#include "evc/tensor.hpp"

namespace evc {

void DiscreteCDF::validate() const {
  if (cdf.size() < 2) throw ValidationError("DiscreteCDF: needs at least one slot");
  if (cdf.front() != 0) throw ValidationError("DiscreteCDF: cdf[0] must be 0");
  if (cdf.back() != kProbabilityTotal) throw ValidationError("DiscreteCDF: total must be 2^16");
  for (std::size_t i = 1; i < cdf.size(); ++i) {
    if (cdf[i] <= cdf[i - 1]) {
      throw ValidationError("DiscreteCDF: slot " + std::to_string(i - 1) + " has zero count");
    }
  }
  if (alphabet_size() < 1) throw ValidationError("DiscreteCDF: empty alphabet");
}

std::vector<std::uint32_t> integerize_probabilities(std::span<const double> probs) {
  const std::size_t n = probs.size();
  if (n == 0 || n > kProbabilityTotal) {
    throw ValidationError("integerize_probabilities: slot count must be in [1, 2^16]");
  }
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError("probabilities must be finite and >= 0");
    total += p;
  }
  const double budget = static_cast<double>(kProbabilityTotal - n);
  std::vector<std::uint32_t> counts(n);
  std::vector<double> frac(n);
  std::uint64_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = total > 0.0 ? probs[i] / total * budget : budget / static_cast<double>(n);
    const double fl = std::floor(share);
    counts[i] = 1 + static_cast<std::uint32_t>(fl);
    frac[i] = share - fl;
    used += counts[i];
  }
  // floor() over a budget of 2^16 - n never overshoots, so only a shortfall remains.
  std::uint64_t left = kProbabilityTotal - used;
  if (left > 0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t i = 0; left > 0; i = (i + 1) % n, --left) counts[order[i]] += 1;
  }
  return counts;
}

DiscreteCDF make_cdf(std::int32_t min_symbol, std::span<const double> probs, bool has_escape) {
  DiscreteCDF t;
  t.min_symbol = min_symbol;
  t.has_escape = has_escape;
  const auto counts = integerize_probabilities(probs);
  t.cdf.resize(counts.size() + 1);
  t.cdf[0] = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t.cdf[i + 1] = t.cdf[i] + counts[i];
  return t;
}

std::vector<double> gaussian_symbol_probabilities(double mean, double scale, std::int32_t s_min,
                                                  std::int32_t s_max) {
  if (s_min > s_max) throw ValidationError("gaussian table: s_min > s_max");
  if (!(scale > 0.0)) throw ValidationError("gaussian table: scale must be > 0");
  std::vector<double> p;
  p.reserve(static_cast<std::size_t>(s_max - s_min) + 2);
  for (std::int32_t k = s_min; k <= s_max; ++k) p.push_back(gaussian_bin_mass(k, mean, scale, 1.0));
  const double below = std_normal_cdf((s_min - 0.5 - mean) / scale);
  const double above = std_normal_cdf(-(s_max + 0.5 - mean) / scale);
  p.push_back(below + above);
  return p;
}

DiscreteCDF gaussian_cdf_table(double mean, double scale, std::int32_t s_min, std::int32_t s_max) {
  const auto p = gaussian_symbol_probabilities(mean, scale, s_min, s_max);
  return make_cdf(s_min, p, true);
}

DiscreteCDF gaussian_cdf_for_latent(double mean, double scale) {
  const double centre = round_half_away(std::clamp(mean, -1e6, 1e6));
  const int half = static_cast<int>(
      std::min<double>(kMaxHalfWidth, std::ceil(kTailSigmas * scale) + 1.0));
  const auto c = static_cast<std::int32_t>(centre);
  return gaussian_cdf_table(mean, scale, c - half, c + half);
}

void encode_symbol(RangeEncoder& enc, const DiscreteCDF& cdf, std::int32_t symbol) {
  const std::int64_t slot = static_cast<std::int64_t>(symbol) - cdf.min_symbol;
  if (slot >= 0 && slot < cdf.alphabet_size()) {
    enc.encode(cdf.cdf[slot], cdf.count(static_cast<int>(slot)));
    return;
  }
  if (!cdf.has_escape) {
    throw ValidationError("symbol " + std::to_string(symbol) + " outside table without escape");
  }
  const int esc = cdf.slots() - 1;
  enc.encode(cdf.cdf[esc], cdf.count(esc));
  const auto raw = static_cast<std::uint32_t>(symbol);
  enc.encode_bits(raw >> 16, 16);
  enc.encode_bits(raw & 0xFFFFu, 16);
}

std::int32_t decode_symbol(RangeDecoder& dec, const DiscreteCDF& cdf) {
  const std::uint32_t f = dec.threshold();
  const auto it = std::upper_bound(cdf.cdf.begin(), cdf.cdf.end(), f);
  const int slot = static_cast<int>(it - cdf.cdf.begin()) - 1;
  dec.consume(cdf.cdf[slot], cdf.count(slot));
  if (slot < cdf.alphabet_size()) return cdf.min_symbol + slot;
  const std::uint32_t hi = dec.decode_bits(16);
  const std::uint32_t lo = dec.decode_bits(16);
  return static_cast<std::int32_t>((hi << 16) | lo);
}

double symbol_cost_bits(const DiscreteCDF& cdf, std::int32_t symbol) {
  const std::int64_t slot = static_cast<std::int64_t>(symbol) - cdf.min_symbol;
  const double total = kProbabilityTotal;
  if (slot >= 0 && slot < cdf.alphabet_size()) {
    return -std::log2(cdf.count(static_cast<int>(slot)) / total);
  }
  return -std::log2(cdf.count(cdf.slots() - 1) / total) + 32.0;
}

}  // namespace evc
