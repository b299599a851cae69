#include "esrie/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "esrie/error.hpp"
#include "esrie/metrics.hpp"

namespace esrie::baselines {
namespace {

// Mirror with the edge sample repeated (..., 1, 0 | 0, 1, ...), i.e. a
// zero-flux boundary for the diffusion update.
int symmetric_index(int i, int n) {
  if (i < 0) return std::min(-i - 1, n - 1);
  if (i >= n) return std::max(2 * n - i - 1, 0);
  return i;
}

}  // namespace

double coefficient_of_variation(const Image& img, const std::optional<RoiSpec>& roi) {
  metrics::Moments m;
  if (roi) {
    m = metrics::region_moments(img, *roi);
  } else {
    const std::vector<double> all(img.data().begin(), img.data().end());
    m = metrics::moments(all);
  }
  if (m.mean == 0.0) throw Error(ErrorCode::ZeroDenominator, "coefficient of variation of a zero-mean region");
  return std::sqrt(m.variance) / m.mean;
}

Image lee_filter(const Image& img, const LeeConfig& cfg) {
  if (cfg.window < 3 || cfg.window % 2 == 0) throw Error(ErrorCode::InvalidConfig, "Lee window must be odd and >= 3");
  const double cu = cfg.cu ? *cfg.cu : coefficient_of_variation(img, cfg.homogeneous_roi);
  if (!(cu > 0.0)) throw Error(ErrorCode::InvalidConfig, "Lee noise coefficient of variation must be positive");
  const double cu2 = cu * cu;
  const int half = cfg.window / 2;
  const int w = img.width();
  const int h = img.height();
  const double n = static_cast<double>(cfg.window) * cfg.window;

  std::vector<float> out(img.size());
  for (int z = 0; z < h; ++z) {
    for (int x = 0; x < w; ++x) {
      double sum = 0.0;
      for (int j = -half; j <= half; ++j)
        for (int i = -half; i <= half; ++i) sum += img.at(reflect_index(x + i, w), reflect_index(z + j, h));
      const double m = sum / n;
      double ss = 0.0;
      for (int j = -half; j <= half; ++j)
        for (int i = -half; i <= half; ++i) {
          const double d = img.at(reflect_index(x + i, w), reflect_index(z + j, h)) - m;
          ss += d * d;
        }
      const double v = ss / n;
      const double k = v > 0.0 ? std::clamp(1.0 - cu2 * m * m / v, 0.0, 1.0) : 0.0;
      const double y = m + k * (img.at(x, z) - m);
      out[static_cast<std::size_t>(z) * w + x] = static_cast<float>(std::clamp(y, 0.0, 255.0));
    }
  }
  return img.with_data(Domain::Display8, std::move(out));
}

void srad_step(std::vector<double>& intensity, int width, int height, double q0, double dt) {
  const double q0sq = q0 * q0;
  const std::size_t count = intensity.size();
  std::vector<double> c(count);
  std::vector<double> dn(count), ds(count), dw(count), de(count);
  auto at = [&](int x, int z) {
    return intensity[static_cast<std::size_t>(symmetric_index(z, height)) * width + symmetric_index(x, width)];
  };
  for (int z = 0; z < height; ++z) {
    for (int x = 0; x < width; ++x) {
      const std::size_t k = static_cast<std::size_t>(z) * width + x;
      const double center = intensity[k];
      dn[k] = at(x, z - 1) - center;
      ds[k] = at(x, z + 1) - center;
      dw[k] = at(x - 1, z) - center;
      de[k] = at(x + 1, z) - center;
      const double g2 = (dn[k] * dn[k] + ds[k] * ds[k] + dw[k] * dw[k] + de[k] * de[k]) / (center * center);
      const double l = (dn[k] + ds[k] + dw[k] + de[k]) / center;
      const double num = 0.5 * g2 - (1.0 / 16.0) * l * l;
      const double den = (1.0 + 0.25 * l) * (1.0 + 0.25 * l);
      const double qsq = num / den;
      const double coeff = 1.0 / (1.0 + (qsq - q0sq) / (q0sq * (1.0 + q0sq)));
      c[k] = std::clamp(coeff, 0.0, 1.0);
    }
  }
  for (int z = 0; z < height; ++z) {
    for (int x = 0; x < width; ++x) {
      const std::size_t k = static_cast<std::size_t>(z) * width + x;
      const double c_south = c[static_cast<std::size_t>(symmetric_index(z + 1, height)) * width + x];
      const double c_east = c[static_cast<std::size_t>(z) * width + symmetric_index(x + 1, width)];
      const double div = c_south * ds[k] + c[k] * dn[k] + c_east * de[k] + c[k] * dw[k];
      intensity[k] += 0.25 * dt * div;
    }
  }
}

Image srad_filter(const Image& img, const SradConfig& cfg) {
  if (!(cfg.dt > 0.0) || cfg.dt > 0.25) throw Error(ErrorCode::NonPositiveTimestep, "SRAD time step must lie in (0, 0.25]");
  if (cfg.iterations < 1) throw Error(ErrorCode::InvalidConfig, "SRAD needs at least one iteration");
  std::vector<double> intensity(img.data().begin(), img.data().end());
  for (auto& v : intensity) v += 1.0;

  double q0 = 0.0;
  if (cfg.q0) {
    q0 = *cfg.q0;
  } else {
    Image shifted = img.with_data(img.domain(), std::vector<float>(intensity.begin(), intensity.end()));
    q0 = coefficient_of_variation(shifted, cfg.homogeneous_roi);
  }
  // A perfectly flat reference region would make the diffusion coefficient
  // singular; the floor keeps it well defined (c saturates at 1).
  q0 = std::max(q0, 1e-3);

  for (int it = 0; it < cfg.iterations; ++it) {
    const double q = q0 * std::exp(-cfg.decay * it * cfg.dt);
    srad_step(intensity, img.width(), img.height(), std::max(q, 1e-3), cfg.dt);
  }
  std::vector<float> out(intensity.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::clamp(intensity[i] - 1.0, 0.0, 255.0));
  return img.with_data(img.domain(), std::move(out));
}

}  // namespace esrie::baselines
