#pragma once

#include <cmath>
#include <numbers>
#include <type_traits>

namespace evc {

/// Accumulation type for element type T: double, or long double when the
/// elements already are.
template <typename T>
using Acc = std::conditional_t<std::is_same_v<T, long double>, long double, double>;

/// Rounding used for every quantizer in the codec (train-time STE, eval
/// symbols, z symbols): halves round away from zero.
inline double round_half_away(double x) { return std::round(x); }

template <typename R = double>
R std_normal_cdf(std::type_identity_t<R> x) {
  return R(0.5) * std::erfc(-x / std::numbers::sqrt2_v<R>);
}

template <typename R = double>
R std_normal_pdf(std::type_identity_t<R> x) {
  return std::exp(R(-0.5) * x * x) / std::sqrt(R(2) * std::numbers::pi_v<R>);
}

/// Mass of N(mean, scale^2) on [y - step/2, y + step/2]. Evaluated on the
/// lower tail (|y - mean|) so small masses keep relative precision.
template <typename R = double>
R gaussian_bin_mass(std::type_identity_t<R> y, std::type_identity_t<R> mean, std::type_identity_t<R> scale,
                    std::type_identity_t<R> step) {
  const R v = std::abs(y - mean);
  const R upper = (R(0.5) * step - v) / scale;
  const R lower = (R(-0.5) * step - v) / scale;
  return std_normal_cdf<R>(upper) - std_normal_cdf<R>(lower);
}

template <typename R = double>
struct GaussianBinGrad {
  R mass;
  R d_y;      // dmass/dy (dmass/dmean is the negation)
  R d_scale;  // dmass/dscale
  R d_step;   // dmass/dstep
};

template <typename R = double>
GaussianBinGrad<R> gaussian_bin_mass_grad(std::type_identity_t<R> y, std::type_identity_t<R> mean,
                                          std::type_identity_t<R> scale, std::type_identity_t<R> step) {
  const R diff = y - mean;
  const R v = std::abs(diff);
  const R a = (R(0.5) * step - v) / scale;
  const R b = (R(-0.5) * step - v) / scale;
  const R pa = std_normal_pdf<R>(a);
  const R pb = std_normal_pdf<R>(b);
  const R sign = diff > 0 ? R(1) : (diff < 0 ? R(-1) : R(0));
  GaussianBinGrad<R> g{};
  g.mass = std_normal_cdf<R>(a) - std_normal_cdf<R>(b);
  g.d_y = sign * (pb - pa) / scale;
  g.d_scale = (-a * pa + b * pb) / scale;
  g.d_step = R(0.5) * (pa + pb) / scale;
  return g;
}

}  // namespace evc
