#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "esrie/image.hpp"

namespace esrie {

enum class RoiKind { Region, LateralProfile, AxialProfile };

std::string_view to_string(RoiKind kind);
RoiKind parse_roi_kind(std::string_view text);

/// Rectangle [x0, x1) x [z0, z1) in pixel coordinates. Profile ROIs are one
/// pixel thick across their orthogonal axis.
struct RoiSpec {
  std::string name;
  int x0 = 0;
  int z0 = 0;
  int x1 = 0;
  int z1 = 0;
  RoiKind kind = RoiKind::Region;

  int width() const noexcept { return x1 - x0; }
  int height() const noexcept { return z1 - z0; }
  std::size_t count() const noexcept { return static_cast<std::size_t>(width()) * height(); }

  /// Throws InvalidRoi if the rectangle does not fit the image or a profile
  /// is thicker than one pixel.
  void validate(const Image& img) const;
};

/// Pixel values inside a region, row-major.
std::vector<double> roi_values(const Image& img, const RoiSpec& roi);

/// Line-oriented ROI file: `name kind x0 z0 x1 z1` with kind one of
/// region | lateral | axial. Blank lines and `#` comments are skipped.
std::vector<RoiSpec> read_roi_file(const std::filesystem::path& path);
void write_roi_file(const std::vector<RoiSpec>& rois, const std::filesystem::path& path);
std::vector<RoiSpec> parse_roi_text(std::string_view text);

const RoiSpec* find_roi(const std::vector<RoiSpec>& rois, std::string_view name);

}  // namespace esrie
