#pragma once

#include <cmath>
#include <cstdint>

namespace esrie {

// Every float-to-integer conversion in the toolkit rounds half away from zero.
inline double round_half_away(double v) { return std::round(v); }

inline std::int64_t round_half_away_to_int(double v) { return static_cast<std::int64_t>(std::llround(v)); }

inline float clamp_display(double v) {
  return static_cast<float>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
}

}  // namespace esrie
