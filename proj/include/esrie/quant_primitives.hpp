#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "esrie/error.hpp"

namespace esrie::quant {

/// Asymmetric uint8 activation quantization: real = scale * (q - zero_point).
struct ActivationQuant {
  float scale = 1.0f / 255.0f;
  std::int32_t zero_point = 0;

  float lo() const noexcept { return scale * static_cast<float>(0 - zero_point); }
  float hi() const noexcept { return scale * static_cast<float>(255 - zero_point); }
  bool operator==(const ActivationQuant&) const = default;
};

/// Symmetric int8 weights with a per-tensor scale: real = scale * q.
struct QuantizedTensor {
  std::vector<std::int8_t> q;
  float scale = 1.0f;
};

inline constexpr ActivationQuant kDisplayQuant{1.0f / 255.0f, 0};

/// s = max|w| / 127 (1 when w is all zero), q = clamp(round(w / s), -127, 127).
inline QuantizedTensor quantize_weights(std::span<const float> w) {
  float peak = 0.0f;
  for (float v : w) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteWeights, "weight tensor contains NaN/Inf");
    peak = std::max(peak, std::abs(v));
  }
  QuantizedTensor out;
  out.scale = peak > 0.0f ? peak / 127.0f : 1.0f;
  out.q.resize(w.size());
  // w / s evaluated as w * 127 / peak in double so that exact halves such as
  // 0.5 / (1/127) = 63.5 are not perturbed by the float scale.
  const double inv = peak > 0.0f ? 127.0 / static_cast<double>(peak) : 1.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = std::round(static_cast<double>(w[i]) * inv);
    out.q[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
  }
  return out;
}

inline std::vector<float> dequantize(const QuantizedTensor& t) {
  std::vector<float> out(t.q.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.scale * static_cast<float>(t.q[i]);
  return out;
}

/// Quantize-dequantize one activation value. `inside` reports whether the
/// value fell within the representable range (the straight-through mask).
inline float fake_quant(float v, const ActivationQuant& p, bool& inside) {
  const double q = std::round(static_cast<double>(v) / p.scale) + p.zero_point;
  inside = q >= 0.0 && q <= 255.0;
  const double qc = std::clamp(q, 0.0, 255.0);
  return static_cast<float>(p.scale * (qc - p.zero_point));
}

inline std::uint8_t quantize_activation(float v, const ActivationQuant& p) {
  const double q = std::round(static_cast<double>(v) / p.scale) + p.zero_point;
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

/// Scale and zero-point from an observed range. A degenerate range (min ==
/// max == c) falls back to scale max(|c|, 1)/255 with the zero-point at the
/// end of the range that keeps c representable. Otherwise the range is
/// widened to include 0 so that zero padding is exact.
inline ActivationQuant choose_activation_quant(float min_v, float max_v) {
  ActivationQuant p;
  if (min_v == max_v) {
    p.scale = std::max(std::abs(min_v), 1.0f) / 255.0f;
    p.zero_point = min_v >= 0.0f ? 0 : 255;
    return p;
  }
  const float lo = std::min(min_v, 0.0f);
  const float hi = std::max(max_v, 0.0f);
  p.scale = (hi - lo) / 255.0f;
  const double z = std::round(-static_cast<double>(lo) / p.scale);
  p.zero_point = static_cast<std::int32_t>(std::clamp(z, 0.0, 255.0));
  return p;
}

}  // namespace esrie::quant
