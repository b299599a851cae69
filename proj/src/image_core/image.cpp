#include "esrie/image.hpp"

#include <algorithm>
#include <cmath>

#include "esrie/error.hpp"
#include "esrie/rounding.hpp"

namespace esrie {

std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::LinearAmplitude: return "linear";
    case Domain::Decibel: return "dB";
    case Domain::Display8: return "display8";
  }
  return "?";
}

Image::Image(int width, int height, Domain domain, float fill)
    : width_(width), height_(height), domain_(domain) {
  if (width < 1 || height < 1) throw Error(ErrorCode::InvalidImage, "image extents must be >= 1");
  data_.assign(static_cast<std::size_t>(width) * height, fill);
}

Image::Image(int width, int height, Domain domain, std::vector<float> data)
    : width_(width), height_(height), domain_(domain), data_(std::move(data)) {
  if (width < 1 || height < 1) throw Error(ErrorCode::InvalidImage, "image extents must be >= 1");
  if (data_.size() != static_cast<std::size_t>(width) * height)
    throw Error(ErrorCode::InvalidImage, "data length does not match width*height");
}

Image Image::with_data(Domain domain, std::vector<float> data) const {
  Image out(width_, height_, domain, std::move(data));
  out.set_spacing(dx_, dz_);
  return out;
}

Image Image::crop(int x0, int z0, int w, int h) const {
  if (x0 < 0 || z0 < 0 || w < 1 || h < 1 || x0 + w > width_ || z0 + h > height_)
    throw Error(ErrorCode::InvalidRoi, "crop window outside image");
  Image out(w, h, domain_);
  out.set_spacing(dx_, dz_);
  for (int z = 0; z < h; ++z) {
    auto src = row(z0 + z).subspan(x0, w);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(z) * w);
  }
  return out;
}

void Image::validate() const {
  for (float v : data_) {
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidImage, "non-finite pixel");
    switch (domain_) {
      case Domain::LinearAmplitude:
        if (v < 0.0f) throw Error(ErrorCode::InvalidImage, "negative linear amplitude");
        break;
      case Domain::Decibel:
        if (v > 0.0f) throw Error(ErrorCode::InvalidImage, "dB value above 0");
        break;
      case Domain::Display8:
        if (v < 0.0f || v > 255.0f) throw Error(ErrorCode::InvalidImage, "display value outside [0,255]");
        break;
    }
  }
}

Image to_decibel(const Image& img, double floor_db) {
  if (!(floor_db < 0.0)) throw Error(ErrorCode::InvalidConfig, "floor_db must be negative");
  const auto src = img.data();
  const float peak = *std::max_element(src.begin(), src.end());
  if (!(peak > 0.0f)) throw Error(ErrorCode::AllZeroImage, "cannot reference dB to a zero maximum");
  std::vector<float> out(src.size());
  const double inv_peak = 1.0 / peak;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double ratio = src[i] * inv_peak;
    const double db = ratio > 0.0 ? 20.0 * std::log10(ratio) : floor_db;
    out[i] = static_cast<float>(std::max(db, floor_db));
  }
  return img.with_data(Domain::Decibel, std::move(out));
}

Image to_display(const Image& img, double range_db) {
  if (!(range_db > 0.0)) throw Error(ErrorCode::InvalidConfig, "range_db must be positive");
  const auto src = img.data();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double t = (static_cast<double>(src[i]) + range_db) / range_db * 255.0;
    out[i] = clamp_display(round_half_away(t));
  }
  return img.with_data(Domain::Display8, std::move(out));
}

Image display_to_decibel(const Image& img, double range_db) {
  const auto src = img.data();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(src[i]) / 255.0 * range_db - range_db);
  return img.with_data(Domain::Decibel, std::move(out));
}

Image display_to_linear(const Image& img, double range_db) {
  const auto src = img.data();
  const float peak = *std::max_element(src.begin(), src.end());
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double db = (static_cast<double>(src[i]) - peak) / 255.0 * range_db;
    out[i] = static_cast<float>(std::pow(10.0, db / 20.0));
  }
  return img.with_data(Domain::LinearAmplitude, std::move(out));
}

}  // namespace esrie
