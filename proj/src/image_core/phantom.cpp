#include "esrie/phantom.hpp"

#include <cmath>

#include "esrie/error.hpp"
#include "esrie/rng.hpp"

namespace esrie {

Image make_phantom(const PhantomSpec& spec) {
  if (spec.background_echo < 0.0f) throw Error(ErrorCode::InvalidConfig, "background echo must be >= 0");
  Image img(spec.width, spec.height, Domain::LinearAmplitude, spec.background_echo);
  for (const auto& inc : spec.inclusions) {
    if (inc.echo < 0.0f || inc.radius < 0.0) throw Error(ErrorCode::InvalidConfig, "inclusion echo and radius must be >= 0");
    if (inc.cx - inc.radius < 0.0 || inc.cz - inc.radius < 0.0 || inc.cx + inc.radius > spec.width - 1 ||
        inc.cz + inc.radius > spec.height - 1)
      throw Error(ErrorCode::InclusionOutOfBounds, "inclusion at (" + std::to_string(inc.cx) + ", " +
                                                       std::to_string(inc.cz) + ") leaves the image");
  }
  for (int z = 0; z < spec.height; ++z) {
    for (int x = 0; x < spec.width; ++x) {
      for (const auto& inc : spec.inclusions) {
        const double ddx = x - inc.cx;
        const double ddz = z - inc.cz;
        if (ddx * ddx + ddz * ddz <= inc.radius * inc.radius) {
          img.at(x, z) = inc.echo;
          break;
        }
      }
    }
  }
  return img;
}

PhantomSpec cyst2_phantom() {
  PhantomSpec spec;
  spec.width = 256;
  spec.height = 256;
  spec.background_echo = 1.0f;
  spec.inclusions = {
      {80.0, 140.0, 52.0, 0.0f},
      {186.0, 140.0, 44.0, 3.0f},
  };
  return spec;
}

std::vector<RoiSpec> cyst2_rois() {
  return {
      {"background", 40, 16, 216, 64, RoiKind::Region},
      {"cyst", 56, 116, 104, 164, RoiKind::Region},
      {"hyper", 166, 120, 206, 160, RoiKind::Region},
      {"lateral", 8, 140, 248, 141, RoiKind::LateralProfile},
  };
}

PhantomSpec random_phantom(int width, int height, std::uint64_t seed) {
  Rng rng(seed);
  PhantomSpec spec;
  spec.width = width;
  spec.height = height;
  spec.background_echo = static_cast<float>(rng.uniform(0.6, 1.4));
  const int count = 1 + static_cast<int>(rng.below(4));
  const double max_radius = 0.3 * std::min(width, height);
  for (int i = 0; i < count; ++i) {
    Inclusion inc;
    inc.radius = rng.uniform(4.0, max_radius);
    inc.cx = rng.uniform(inc.radius, width - 1 - inc.radius);
    inc.cz = rng.uniform(inc.radius, height - 1 - inc.radius);
    switch (rng.below(3)) {
      case 0: inc.echo = 0.0f; break;                                        // anechoic
      case 1: inc.echo = static_cast<float>(rng.uniform(0.05, 0.5)); break;  // hypoechoic
      default: inc.echo = static_cast<float>(rng.uniform(1.8, 4.0)); break;  // hyperechoic
    }
    spec.inclusions.push_back(inc);
  }
  return spec;
}

}  // namespace esrie
