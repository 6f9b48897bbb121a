#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "evc/autograd.hpp"
#include "evc/cdf.hpp"

namespace evc {

/// Learned per-channel cumulative model c(x) for the hyper-latent z: a chain
/// of monotone scalar stages 1 -> 3 -> 3 -> 3 -> 1 (positive weights through
/// softplus, bounded tanh residual nonlinearity), squashed by a sigmoid.
template <typename T>
class FactorizedPrior {
 public:
  static constexpr int kStages = 4;
  static constexpr int kWidth = 3;
  // Per channel: matrices 3 + 9 + 9 + 3, biases 3 + 3 + 3 + 1, factors 3 + 3 + 3.
  static constexpr int kMatrixParams = 24;
  static constexpr int kBiasParams = 10;
  static constexpr int kFactorParams = 9;
  /// Half-width of the integer alphabet used when coding z.
  static constexpr int kHalfWidth = 48;

  FactorizedPrior() = default;
  FactorizedPrior(int channels, std::mt19937_64& rng);

  int channels() const { return matrices ? matrices->value.n() : 0; }

  /// Logit of c(x) for channel `c` (c(x) = sigmoid(logit)).
  double logit(int c, double x) const;
  double cdf(int c, double x) const;

  /// Total -log2 likelihood of z (unit bins), differentiable w.r.t. z and the
  /// prior parameters.
  Var<T> rate(Graph<T>& g, const Var<T>& z) const;

  /// Coding table for channel c over [-kHalfWidth, kHalfWidth] plus escape.
  DiscreteCDF table(int c) const;

  Var<T> matrices, biases, factors;  // [C, K, 1, 1] each

  template <typename U>
  FactorizedPrior<U> cast() const;
};

/// Bits of z coded with per-channel tables.
template <typename T>
std::vector<std::uint8_t> encode_hyper_latent(const FactorizedPrior<T>& prior,
                                              const std::vector<std::int32_t>& symbols, int channels,
                                              int plane);
template <typename T>
std::vector<std::int32_t> decode_hyper_latent(const FactorizedPrior<T>& prior,
                                              std::span<const std::uint8_t> bytes, int channels,
                                              int plane, std::size_t base_offset);

}  // namespace evc
