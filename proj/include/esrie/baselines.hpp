#pragma once

#include <optional>

#include "esrie/image.hpp"
#include "esrie/roi.hpp"

namespace esrie::baselines {

struct LeeConfig {
  int window = 7;
  /// Noise coefficient of variation. When unset, estimated from `homogeneous_roi`
  /// (or the whole image when no ROI is given).
  std::optional<double> cu;
  std::optional<RoiSpec> homogeneous_roi;
};

struct SradConfig {
  int iterations = 50;
  double dt = 0.05;
  /// q0(t) = q0 * exp(-decay * t) with t = iteration * dt.
  double decay = 1.0 / 6.0;
  /// Initial speckle scale q0; estimated like LeeConfig::cu when unset.
  std::optional<double> q0;
  std::optional<RoiSpec> homogeneous_roi;
};

/// std/mean of a region (or of the full image).
double coefficient_of_variation(const Image& img, const std::optional<RoiSpec>& roi);

/// Lee local-statistics filter with reflect padding:
/// out = m + k (x - m), k = max(0, 1 - Cu^2 m^2 / v), k = 0 where v == 0.
Image lee_filter(const Image& img, const LeeConfig& cfg);

/// Speckle reducing anisotropic diffusion on (display + 1) intensities with
/// reflect boundaries; the offset is removed and the result clamped to [0,255].
Image srad_filter(const Image& img, const SradConfig& cfg);

/// One SRAD update on a strictly positive intensity field, in place.
void srad_step(std::vector<double>& intensity, int width, int height, double q0, double dt);

}  // namespace esrie::baselines
