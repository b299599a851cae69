#pragma once

#include <cstdint>
#include <vector>

#include "esrie/image.hpp"
#include "esrie/roi.hpp"

namespace esrie {

struct Inclusion {
  double cx = 0.0;
  double cz = 0.0;
  double radius = 0.0;
  float echo = 0.0f;
};

/// Echogenicity map description: a homogeneous background with circular
/// inclusions. A pixel (x, z) is inside an inclusion when
/// (x - cx)^2 + (z - cz)^2 <= radius^2.
struct PhantomSpec {
  int width = 0;
  int height = 0;
  float background_echo = 1.0f;
  std::vector<Inclusion> inclusions;
};

/// Rasterizes the phantom in linear amplitude. On overlap the first listed
/// inclusion wins. Throws InclusionOutOfBounds when a disk leaves the image.
Image make_phantom(const PhantomSpec& spec);

/// Two-inclusion 256x256 evaluation phantom: an anechoic cyst and a
/// hyperechoic disk side by side at the same depth.
PhantomSpec cyst2_phantom();

/// ROIs paired with cyst2_phantom(): `background`, `cyst`, `hyper` regions and
/// the `lateral` profile crossing both inclusions.
std::vector<RoiSpec> cyst2_rois();

/// Random training phantom with 1-4 inclusions of mixed echogenicity.
PhantomSpec random_phantom(int width, int height, std::uint64_t seed);

}  // namespace esrie
