#pragma once

#include <span>
#include <string>
#include <vector>

#include "esrie/image.hpp"
#include "esrie/roi.hpp"

namespace esrie::metrics {

/// SSIM stabilizers for an 8-bit dynamic range: (0.01*255)^2 and (0.03*255)^2.
inline constexpr double kSsimC1 = 6.5025;
inline constexpr double kSsimC2 = 58.5225;

/// Population moments of a sample.
struct Moments {
  double mean = 0.0;
  double variance = 0.0;
  std::size_t count = 0;
};

Moments moments(std::span<const double> values);
Moments region_moments(const Image& img, const RoiSpec& roi);

/// Contrast-to-noise ratio in dB between background and cyst statistics.
/// Returns -infinity when the means coincide; throws ZeroDenominator when
/// both variances vanish.
double cnr(const Moments& background, const Moments& cyst);
double cnr(const Image& img, const RoiSpec& background, const RoiSpec& cyst);

double ssnr(const Moments& region);
double ssnr(const Image& img, const RoiSpec& region);

double enl(const Moments& region);
double enl(const Image& img, const RoiSpec& region);

/// Mean absolute first difference along a profile; N >= 2.
double agm(std::span<const double> profile);

/// Global SSIM: one application of the formula over the whole image.
double ssim(std::span<const double> f, std::span<const double> g);
double ssim(const Image& f, const Image& g);

/// Pixel values along a lateral or axial profile ROI, in index order.
std::vector<double> extract_profile(const Image& img, const RoiSpec& roi);

}  // namespace esrie::metrics
