#include "evc/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace evc {

std::pair<int, int> padded_size(int w, int h, int unit) {
  if (unit < 1) throw ValidationError("pad unit must be positive");
  if (w < 0 || h < 0) throw ValidationError("negative image size");
  auto up = [unit](int v) { return std::max(unit, (v + unit - 1) / unit * unit); };
  return {up(w), up(h)};
}

Tensor pad_to_multiple(const Tensor& x, int unit) {
  const auto [pw, ph] = padded_size(x.w(), x.h(), unit);
  if (pw == x.w() && ph == x.h()) return x;
  Tensor out(Shape(x.n(), x.c(), ph, pw));
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int h = 0; h < x.h(); ++h)
        std::copy_n(&x.at(n, c, h, 0), x.w(), &out.at(n, c, h, 0));
  return out;
}

Tensor crop(const Tensor& x, int w, int h) {
  if (w > x.w() || h > x.h() || w < 1 || h < 1) {
    throw DimensionError("crop " + std::to_string(w) + "x" + std::to_string(h) + " outside " + x.shape().str());
  }
  Tensor out(Shape(x.n(), x.c(), h, w));
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < h; ++y) std::copy_n(&x.at(n, c, y, 0), w, &out.at(n, c, y, 0));
  return out;
}

double psnr(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) {
    throw ValidationError("psnr: sample counts differ (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw ValidationError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0.0) return kPsnrCap;
  const double mse = se / static_cast<double>(a.size());
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

namespace {

std::vector<std::uint8_t> to_8bit(const Tensor& t) {
  std::vector<std::uint8_t> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ValidationError("psnr: shapes differ " + a.shape().str() + " vs " + b.shape().str());
  return psnr(to_8bit(a), to_8bit(b));
}

double bpp(std::size_t bytes, int width, int height) {
  if (width < 1 || height < 1) throw ValidationError("bpp: dimensions must be positive");
  return 8.0 * static_cast<double>(bytes) / (static_cast<double>(width) * height);
}

namespace {

// Least-squares cubic log(rate) = p(psnr).
Eigen::Vector4d fit_cubic(const RDCurve& c) {
  Eigen::MatrixXd A(c.size(), 4);
  Eigen::VectorXd b(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double p = c[i].psnr;
    A(i, 0) = 1.0;
    A(i, 1) = p;
    A(i, 2) = p * p;
    A(i, 3) = p * p * p;
    b(i) = std::log(c[i].bpp);
  }
  return A.colPivHouseholderQr().solve(b);
}

double integral(const Eigen::Vector4d& p, double lo, double hi) {
  auto prim = [&](double x) { return p(0) * x + p(1) * x * x / 2 + p(2) * x * x * x / 3 + p(3) * x * x * x * x / 4; };
  return prim(hi) - prim(lo);
}

void check_curve(const RDCurve& c, const char* name) {
  if (c.size() < 4) throw MetricError(std::string(name) + " curve needs at least 4 points");
  for (const auto& p : c) {
    if (!(p.bpp > 0.0) || !std::isfinite(p.psnr)) {
      throw MetricError(std::string(name) + " curve has non-positive rate or non-finite PSNR");
    }
  }
}

}  // namespace

double bd_rate(const RDCurve& test, const RDCurve& anchor) {
  check_curve(test, "test");
  check_curve(anchor, "anchor");
  auto range = [](const RDCurve& c) {
    auto [lo, hi] = std::minmax_element(c.begin(), c.end(), [](auto& a, auto& b) { return a.psnr < b.psnr; });
    return std::make_pair(lo->psnr, hi->psnr);
  };
  const auto [tlo, thi] = range(test);
  const auto [alo, ahi] = range(anchor);
  const double lo = std::max(tlo, alo), hi = std::min(thi, ahi);
  if (!(hi > lo)) throw MetricError("curves have no overlapping PSNR range");
  const auto pt = fit_cubic(test);
  const auto pa = fit_cubic(anchor);
  const double gap = (integral(pt, lo, hi) - integral(pa, lo, hi)) / (hi - lo);
  return (std::exp(gap) - 1.0) * 100.0;
}

double relative_improvement(double baseline, double ours, double teacher) {
  const double denom = baseline - teacher;
  if (denom == 0.0) throw MetricError("relative improvement undefined: baseline equals teacher");
  return (baseline - ours) / denom * 100.0;
}

}  // namespace evc
