#include "esrie/metrics.hpp"

#include <cmath>
#include <limits>

#include "esrie/error.hpp"

namespace esrie::metrics {

Moments moments(std::span<const double> values) {
  Moments m;
  m.count = values.size();
  if (values.empty()) throw Error(ErrorCode::InvalidRoi, "empty region");
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.variance = ss / static_cast<double>(values.size());
  return m;
}

Moments region_moments(const Image& img, const RoiSpec& roi) {
  if (roi.kind != RoiKind::Region) throw Error(ErrorCode::WrongRoiKind, "'" + roi.name + "' is not a region ROI");
  const auto values = roi_values(img, roi);
  return moments(values);
}

double cnr(const Moments& background, const Moments& cyst) {
  const double denom = background.variance + cyst.variance;
  if (denom == 0.0) throw Error(ErrorCode::ZeroDenominator, "both regions have zero variance");
  const double contrast = std::abs(background.mean - cyst.mean);
  if (contrast == 0.0) return -std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(contrast / std::sqrt(denom));
}

double cnr(const Image& img, const RoiSpec& background, const RoiSpec& cyst) {
  return cnr(region_moments(img, background), region_moments(img, cyst));
}

double ssnr(const Moments& region) {
  if (region.variance == 0.0) throw Error(ErrorCode::ZeroVariance, "region has zero variance");
  return region.mean / std::sqrt(region.variance);
}

double ssnr(const Image& img, const RoiSpec& region) { return ssnr(region_moments(img, region)); }

double enl(const Moments& region) {
  if (region.variance == 0.0) throw Error(ErrorCode::ZeroVariance, "region has zero variance");
  return region.mean * region.mean / region.variance;
}

double enl(const Image& img, const RoiSpec& region) { return enl(region_moments(img, region)); }

double agm(std::span<const double> profile) {
  if (profile.size() < 2) throw Error(ErrorCode::ProfileTooShort, "AGM needs at least two samples");
  double sum = 0.0;
  for (std::size_t n = 0; n + 1 < profile.size(); ++n) sum += std::abs(profile[n + 1] - profile[n]);
  return sum / static_cast<double>(profile.size() - 1);
}

double ssim(std::span<const double> f, std::span<const double> g) {
  if (f.size() != g.size() || f.empty()) throw Error(ErrorCode::ShapeMismatch, "SSIM inputs differ in size");
  const double n = static_cast<double>(f.size());
  double mf = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    mf += f[i];
    mg += g[i];
  }
  mf /= n;
  mg /= n;
  double vf = 0.0, vg = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = f[i] - mf;
    const double b = g[i] - mg;
    vf += a * a;
    vg += b * b;
    cov += a * b;
  }
  vf /= n;
  vg /= n;
  cov /= n;
  return ((2.0 * mf * mg + kSsimC1) * (2.0 * cov + kSsimC2)) / ((mf * mf + mg * mg + kSsimC1) * (vf + vg + kSsimC2));
}

double ssim(const Image& f, const Image& g) {
  if (f.width() != g.width() || f.height() != g.height())
    throw Error(ErrorCode::ShapeMismatch, "SSIM images differ in extents");
  const std::vector<double> a(f.data().begin(), f.data().end());
  const std::vector<double> b(g.data().begin(), g.data().end());
  return ssim(a, b);
}

std::vector<double> extract_profile(const Image& img, const RoiSpec& roi) {
  if (roi.kind == RoiKind::Region) throw Error(ErrorCode::WrongRoiKind, "'" + roi.name + "' is not a profile ROI");
  return roi_values(img, roi);
}

}  // namespace esrie::metrics
