#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace esrie {

enum class Domain : std::uint8_t { LinearAmplitude = 0, Decibel = 1, Display8 = 2 };

std::string_view to_string(Domain d);

/// Row-major 2-D grayscale field. Rows run along the axial (z) direction,
/// columns along the lateral (x) direction.
class Image {
 public:
  static constexpr float kDefaultSpacingMm = 0.1f;

  Image() = default;
  Image(int width, int height, Domain domain, float fill = 0.0f);
  Image(int width, int height, Domain domain, std::vector<float> data);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  Domain domain() const noexcept { return domain_; }
  bool empty() const noexcept { return data_.empty(); }

  float dx() const noexcept { return dx_; }
  float dz() const noexcept { return dz_; }
  void set_spacing(float dx, float dz) noexcept {
    dx_ = dx;
    dz_ = dz;
  }

  float& at(int x, int z) { return data_[static_cast<std::size_t>(z) * width_ + x]; }
  float at(int x, int z) const { return data_[static_cast<std::size_t>(z) * width_ + x]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> row(int z) const { return data().subspan(static_cast<std::size_t>(z) * width_, width_); }

  /// Same geometry and spacing, new domain and values.
  Image with_data(Domain domain, std::vector<float> data) const;

  /// Sub-image [x0, x0+w) x [z0, z0+h).
  Image crop(int x0, int z0, int w, int h) const;

  /// Checks the per-domain value invariants; throws InvalidImage.
  void validate() const;

 private:
  int width_ = 0;
  int height_ = 0;
  Domain domain_ = Domain::LinearAmplitude;
  float dx_ = kDefaultSpacingMm;
  float dz_ = kDefaultSpacingMm;
  std::vector<float> data_;
};

/// Linear amplitude -> dB relative to the image maximum, clipped at floor_db.
Image to_decibel(const Image& img, double floor_db);

/// dB in [-range_db, 0] -> [0, 255], rounded half away from zero.
Image to_display(const Image& img, double range_db);

/// Inverse of to_display followed by inverse dB: Display8 -> linear amplitude
/// with the maximum display value mapping to 1.
Image display_to_linear(const Image& img, double range_db);

/// Display8 -> dB by the linear display mapping (no rounding).
Image display_to_decibel(const Image& img, double range_db);

/// Mirror index into [0, n) without repeating the edge sample.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace esrie
