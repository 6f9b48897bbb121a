#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evc/tensor.hpp"

namespace evc {

/// Next multiples of `unit` at or above (w, h).
std::pair<int, int> padded_size(int w, int h, int unit = 64);

/// Zero-pads right/bottom of an [N, C, H, W] tensor to multiples of `unit`.
Tensor pad_to_multiple(const Tensor& x, int unit = 64);
inline Tensor pad64(const Tensor& x) { return pad_to_multiple(x, 64); }

/// Top-left w x h window.
Tensor crop(const Tensor& x, int w, int h);

inline constexpr double kPsnrCap = 100.0;

/// PSNR in dB on 8-bit samples; identical inputs give kPsnrCap.
double psnr(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
/// PSNR of two [0,1] tensors after rounding both to 8 bits.
double psnr(const Tensor& a, const Tensor& b);

/// Bits per pixel over the original (unpadded) size.
double bpp(std::size_t bytes, int width, int height);

struct RDPoint {
  double bpp = 0.0;
  double psnr = 0.0;
};
using RDCurve = std::vector<RDPoint>;

/// Undefined metric (e.g. curves with no overlapping quality range).
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bjontegaard delta rate in percent: cubic fit of log-rate against PSNR for
/// each curve, mean log-rate gap over the shared PSNR interval. Negative means
/// `test` needs fewer bits than `anchor`.
double bd_rate(const RDCurve& test, const RDCurve& anchor);

/// (baseline - ours) / (baseline - teacher), as a percentage.
double relative_improvement(double baseline, double ours, double teacher);

}  // namespace evc
