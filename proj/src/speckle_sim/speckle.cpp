#include "esrie/speckle.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "esrie/error.hpp"
#include "esrie/fft.hpp"
#include "esrie/parallel.hpp"
#include "esrie/rng.hpp"

namespace esrie {

void SpeckleSimConfig::validate() const {
  if (!(sigma_x > 0.0) || !(sigma_z > 0.0)) throw Error(ErrorCode::InvalidConfig, "PSF sigmas must be positive");
  if (!(cycles >= 1.0)) throw Error(ErrorCode::InvalidConfig, "cycles must be >= 1");
  if (!(noise_std > 0.0)) throw Error(ErrorCode::InvalidConfig, "noise_std must be positive");
  if (!(floor_db < 0.0)) throw Error(ErrorCode::InvalidConfig, "floor_db must be negative");
}

void BlurConfig::validate() const {
  if (!(blur_sigma_lo > 0.0) || blur_sigma_lo > blur_sigma_hi)
    throw Error(ErrorCode::InvalidConfig, "blur sigma range must satisfy 0 < lo <= hi");
  if (!(alpha_lo > 0.0) || alpha_lo > alpha_hi || alpha_hi > 1.0)
    throw Error(ErrorCode::InvalidConfig, "narrowing alpha range must satisfy 0 < lo <= hi <= 1");
}

double carrier_frequency(const SpeckleSimConfig& cfg) { return cfg.cycles / (4.0 * cfg.sigma_z); }

Kernel2D build_psf(const SpeckleSimConfig& cfg) {
  cfg.validate();
  Kernel2D k;
  k.half_x = static_cast<int>(std::ceil(3.0 * cfg.sigma_x));
  k.half_z = static_cast<int>(std::ceil(3.0 * cfg.sigma_z));
  const double f0 = carrier_frequency(cfg);
  k.lateral.resize(k.width());
  k.axial.resize(k.height());
  for (int x = -k.half_x; x <= k.half_x; ++x)
    k.lateral[x + k.half_x] = std::exp(-(x * x) / (2.0 * cfg.sigma_x * cfg.sigma_x));
  for (int z = -k.half_z; z <= k.half_z; ++z)
    k.axial[z + k.half_z] =
        std::exp(-(z * z) / (2.0 * cfg.sigma_z * cfg.sigma_z)) * std::cos(2.0 * std::numbers::pi * f0 * z);
  k.taps.resize(static_cast<std::size_t>(k.width()) * k.height());
  for (int z = 0; z < k.height(); ++z)
    for (int x = 0; x < k.width(); ++x) k.taps[static_cast<std::size_t>(z) * k.width() + x] = k.axial[z] * k.lateral[x];
  return k;
}

Image scatter_field(const Image& echo, double noise_std, std::uint64_t seed) {
  if (echo.domain() != Domain::LinearAmplitude)
    throw Error(ErrorCode::InvalidImage, "echogenicity map must be linear amplitude");
  Rng rng(seed);
  std::vector<float> s(echo.size());
  const auto e = echo.data();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(e[i] * (noise_std * rng.normal()));
  // Signed values: tagged linear for transport only, never validated.
  return echo.with_data(Domain::LinearAmplitude, std::move(s));
}

std::vector<double> rf_signal(const Image& field, const Kernel2D& psf) {
  const int w = field.width();
  const int h = field.height();
  const auto src = field.data();
  // The PSF is separable, so the 2-D convolution runs as a lateral pass then
  // an axial pass. Both factors are symmetric, so convolution equals
  // correlation here.
  std::vector<double> lateral(src.size(), 0.0);
  for (int z = 0; z < h; ++z) {
    const float* in = src.data() + static_cast<std::size_t>(z) * w;
    double* out = lateral.data() + static_cast<std::size_t>(z) * w;
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -psf.half_x; i <= psf.half_x; ++i) {
        const int xs = x - i;
        if (xs >= 0 && xs < w) acc += psf.lateral[i + psf.half_x] * in[xs];
      }
      out[x] = acc;
    }
  }
  std::vector<double> rf(src.size(), 0.0);
  for (int z = 0; z < h; ++z) {
    double* out = rf.data() + static_cast<std::size_t>(z) * w;
    for (int j = -psf.half_z; j <= psf.half_z; ++j) {
      const int zs = z - j;
      if (zs < 0 || zs >= h) continue;
      const double tap = psf.axial[j + psf.half_z];
      const double* in = lateral.data() + static_cast<std::size_t>(zs) * w;
      for (int x = 0; x < w; ++x) out[x] += tap * in[x];
    }
  }
  return rf;
}

Image envelope_detect(const std::vector<double>& rf, int width, int height) {
  std::vector<float> env(rf.size());
  std::vector<double> column(height);
  for (int x = 0; x < width; ++x) {
    for (int z = 0; z < height; ++z) column[z] = rf[static_cast<std::size_t>(z) * width + x];
    const auto analytic = analytic_signal(column);
    for (int z = 0; z < height; ++z) env[static_cast<std::size_t>(z) * width + x] = static_cast<float>(std::abs(analytic[z]));
  }
  return Image(width, height, Domain::LinearAmplitude, std::move(env));
}

Image simulate_envelope(const Image& echo, const SpeckleSimConfig& cfg) {
  cfg.validate();
  const Kernel2D psf = build_psf(cfg);
  if (echo.height() < psf.height())
    throw Error(ErrorCode::ImageTooSmall, "image height " + std::to_string(echo.height()) +
                                              " is below the PSF axial support " + std::to_string(psf.height()));
  const Image field = scatter_field(echo, cfg.noise_std, cfg.seed);
  Image env = envelope_detect(rf_signal(field, psf), echo.width(), echo.height());
  env.set_spacing(echo.dx(), echo.dz());
  return env;
}

Image simulate_bmode(const Image& echo, const SpeckleSimConfig& cfg) {
  return to_decibel(simulate_envelope(echo, cfg), cfg.floor_db);
}

SpeckleSimConfig realization_config(const SpeckleSimConfig& cfg, std::uint64_t index) {
  Rng rng(cfg.seed ^ index);
  SpeckleSimConfig out = cfg;
  out.sigma_x = cfg.sigma_x * rng.uniform(0.8, 1.25);
  out.sigma_z = cfg.sigma_z * rng.uniform(0.8, 1.25);
  out.seed = rng.next_u64();
  return out;
}

std::vector<Image> make_realizations(const Image& echo, const SpeckleSimConfig& cfg, int k, int threads) {
  if (k < 2) throw Error(ErrorCode::InvalidConfig, "need at least two realizations");
  std::vector<Image> out(static_cast<std::size_t>(k));
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = simulate_bmode(echo, realization_config(cfg, i)); });
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidConfig, "blur sigma must be positive");
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * half + 1);
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) sum += taps[i + half] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& t : taps) t /= sum;

  const int w = img.width();
  const int h = img.height();
  const auto src = img.data();
  std::vector<double> tmp(src.size());
  for (int z = 0; z < h; ++z)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += taps[i + half] * src[static_cast<std::size_t>(z) * w + reflect_index(x + i, w)];
      tmp[static_cast<std::size_t>(z) * w + x] = acc;
    }
  std::vector<float> out(src.size());
  for (int z = 0; z < h; ++z)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += taps[i + half] * tmp[static_cast<std::size_t>(reflect_index(z + i, h)) * w + x];
      out[static_cast<std::size_t>(z) * w + x] = static_cast<float>(acc);
    }
  return img.with_data(img.domain(), std::move(out));
}

Image degrade_with(const Image& img, double blur_sigma, double alpha) {
  if (img.domain() != Domain::Display8) throw Error(ErrorCode::InvalidImage, "degrade expects a Display8 image");
  Image blurred = gaussian_blur(img, blur_sigma);
  auto v = blurred.data();
  double mean = 0.0;
  for (float p : v) mean += p;
  mean /= static_cast<double>(v.size());
  for (auto& p : v) {
    const double narrowed = mean + alpha * (p - mean);
    p = static_cast<float>(std::clamp(narrowed, 0.0, 255.0));
  }
  return blurred;
}

Image degrade(const Image& img, const BlurConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const double sigma = rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
  const double alpha = rng.uniform(cfg.alpha_lo, cfg.alpha_hi);
  return degrade_with(img, sigma, alpha);
}

}  // namespace esrie
