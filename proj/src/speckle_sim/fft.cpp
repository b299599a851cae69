#include "esrie/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace esrie {

void fft_inplace(std::span<std::complex<double>> a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft size must be a power of two");

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      // Twiddles are evaluated directly rather than by recurrence so that
      // round-off does not accumulate along a stage.
      const std::complex<double> w(std::cos(angle * static_cast<double>(k)), std::sin(angle * static_cast<double>(k)));
      for (std::size_t i = k; i < n; i += len) {
        const std::complex<double> u = a[i];
        const std::complex<double> v = a[i + half] * w;
        a[i] = u + v;
        a[i + half] = u - v;
      }
    }
  }
}

std::vector<std::complex<double>> analytic_signal(std::span<const double> x) {
  const std::size_t n = next_pow2(x.size());
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < x.size(); ++i) buf[i] = x[i];
  fft_inplace(buf, false);
  if (n > 1) {
    for (std::size_t k = 1; k < n / 2; ++k) buf[k] *= 2.0;
    for (std::size_t k = n / 2 + 1; k < n; ++k) buf[k] = 0.0;
  }
  fft_inplace(buf, true);
  const double inv_n = 1.0 / static_cast<double>(n);
  buf.resize(x.size());
  for (auto& v : buf) v *= inv_n;
  return buf;
}

}  // namespace esrie
