#pragma once

#include <cstdint>
#include <vector>

#include "esrie/image.hpp"

namespace esrie {

/// B-mode simulator parameters. Lengths are in pixels.
struct SpeckleSimConfig {
  double sigma_x = 2.0;   ///< lateral beam profile std
  double sigma_z = 2.5;   ///< axial pulse envelope std
  double cycles = 3.0;    ///< carrier periods inside [-2 sigma_z, +2 sigma_z]
  double noise_std = 1.0; ///< scatterer amplitude std
  std::uint64_t seed = 1;
  double floor_db = -55.0;

  void validate() const;
};

struct BlurConfig {
  double blur_sigma_lo = 0.5;
  double blur_sigma_hi = 2.0;
  double alpha_lo = 0.7;
  double alpha_hi = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Dense odd-sized kernel, row-major with rows along z.
struct Kernel2D {
  int half_x = 0;
  int half_z = 0;
  std::vector<double> taps;     // (2*half_z+1) rows of (2*half_x+1)
  std::vector<double> lateral;  // taps[z][x] == axial[z] * lateral[x]
  std::vector<double> axial;

  int width() const noexcept { return 2 * half_x + 1; }
  int height() const noexcept { return 2 * half_z + 1; }
  double at(int x, int z) const { return taps[static_cast<std::size_t>(z + half_z) * width() + (x + half_x)]; }
};

/// Carrier frequency in cycles per pixel: `cycles` periods over 4 sigma_z.
double carrier_frequency(const SpeckleSimConfig& cfg);

/// k(x,z) = exp(-x^2/2sx^2) exp(-z^2/2sz^2) cos(2 pi f0 z), support
/// +-ceil(3 sigma) per axis, k(0,0) = 1.
Kernel2D build_psf(const SpeckleSimConfig& cfg);

/// Multiplicative scatterer map s = echo * g with g ~ N(0, noise_std^2).
/// Values are drawn row-major from Rng(seed).
Image scatter_field(const Image& echo, double noise_std, std::uint64_t seed);

/// RF image: zero-padded "same" convolution of a field with the PSF.
std::vector<double> rf_signal(const Image& field, const Kernel2D& psf);

/// Envelope |analytic signal| along each axial column.
Image envelope_detect(const std::vector<double>& rf, int width, int height);

/// Pre-log envelope of a B-mode simulation.
Image simulate_envelope(const Image& echo, const SpeckleSimConfig& cfg);

/// Full simulation: envelope followed by log compression (dB, max = 0).
Image simulate_bmode(const Image& echo, const SpeckleSimConfig& cfg);

/// Per-realization parameters derived from the base config.
/// Realization i seeds Rng(cfg.seed ^ i); the first two uniform draws scale
/// sigma_x and sigma_z by factors in [0.8, 1.25] and the third 64-bit draw
/// becomes the scatterer seed.
SpeckleSimConfig realization_config(const SpeckleSimConfig& cfg, std::uint64_t index);

/// k independent dB realizations of one echogenicity map. k >= 2.
std::vector<Image> make_realizations(const Image& echo, const SpeckleSimConfig& cfg, int k, int threads = 1);

/// Normalized Gaussian blur with reflect padding, support +-ceil(3 sigma).
Image gaussian_blur(const Image& img, double sigma);

/// Blur then histogram narrowing v <- mean + alpha (v - mean), clamped to [0,255].
Image degrade_with(const Image& img, double blur_sigma, double alpha);

/// Draws blur sigma and alpha (in that order) from Rng(cfg.seed) and applies
/// degrade_with.
Image degrade(const Image& img, const BlurConfig& cfg);

}  // namespace esrie
