#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace esrie {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// In-place iterative radix-2 FFT; size must be a power of two.
/// inverse=true computes the unnormalized inverse transform.
void fft_inplace(std::span<std::complex<double>> a, bool inverse);

/// Analytic signal of a real sequence via the frequency-domain Hilbert
/// transform: the sequence is zero-padded to the next power of two, negative
/// frequencies are zeroed, positive ones doubled, DC and Nyquist kept as is,
/// then the inverse transform is cropped back to the input length.
std::vector<std::complex<double>> analytic_signal(std::span<const double> x);

}  // namespace esrie
