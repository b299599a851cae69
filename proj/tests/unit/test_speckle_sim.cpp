#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "esrie/error.hpp"
#include "esrie/fft.hpp"
#include "esrie/metrics.hpp"
#include "esrie/phantom.hpp"
#include "esrie/rng.hpp"
#include "esrie/speckle.hpp"

using namespace esrie;

namespace {

// Naive O(n^2) DFT used as an independent oracle for the FFT.
std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x, bool inverse) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc{};
    for (std::size_t j = 0; j < n; ++j)
      acc += x[j] * std::polar(1.0, sign * 2.0 * std::numbers::pi * static_cast<double>(j * k % n) / static_cast<double>(n));
    out[k] = acc;
  }
  return out;
}

Image ones(int w, int h) { return Image(w, h, Domain::LinearAmplitude, 1.0f); }

double correlation(std::span<const float> a, std::span<const float> b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("rng streams are reproducible and normals have unit moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(7);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.01);
  Rng u(9);
  for (int i = 0; i < 1000; ++i) CHECK(u.below(7) < 7u);
}

TEST_CASE("fft matches a direct DFT") {
  Rng rng(11);
  std::vector<std::complex<double>> x(64);
  for (auto& v : x) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (bool inverse : {false, true}) {
    auto y = x;
    fft_inplace(y, inverse);
    const auto ref = dft(x, inverse);
    for (std::size_t k = 0; k < x.size(); ++k) CHECK(std::abs(y[k] - ref[k]) < 1e-10);
  }
}

TEST_CASE("analytic signal of a cosine has constant magnitude") {
  const int n = 256;
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = std::cos(2.0 * std::numbers::pi * 16.0 * i / n);
  const auto a = analytic_signal(x);
  for (int i = 0; i < n; ++i) {
    CHECK(a[i].real() == doctest::Approx(x[i]).epsilon(1e-9));
    CHECK(std::abs(a[i]) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("psf normalization and degenerate width") {
  SpeckleSimConfig cfg;
  const Kernel2D k = build_psf(cfg);
  CHECK(k.at(0, 0) == 1.0);
  CHECK(k.width() % 2 == 1);
  CHECK(k.height() % 2 == 1);
  CHECK(k.half_x == static_cast<int>(std::ceil(3 * cfg.sigma_x)));

  SpeckleSimConfig narrow;
  narrow.sigma_x = 0.3;
  narrow.sigma_z = 0.3;
  narrow.cycles = 1.0;
  const Kernel2D d = build_psf(narrow);
  CHECK(d.width() == 3);
  CHECK(d.height() == 3);
  for (int z = -1; z <= 1; ++z)
    for (int x = -1; x <= 1; ++x)
      if (x != 0 || z != 0) CHECK(std::abs(d.at(x, z)) < 0.005);
}

TEST_CASE("psf axial slice changes sign 2*cycles times within two envelope widths") {
  for (double cycles : {2.0, 3.0, 4.0}) {
    SpeckleSimConfig cfg;
    cfg.sigma_z = 6.0;
    cfg.cycles = cycles;
    const double f0 = carrier_frequency(cfg);
    // Sample the analytic pulse densely over [-2 sz, 2 sz] (excluding the
    // ends, which sit exactly on extrema for integral cycle counts).
    int changes = 0;
    double prev = 0;
    const int steps = 20000;
    for (int i = 1; i < steps; ++i) {
      const double z = -2 * cfg.sigma_z + 4 * cfg.sigma_z * i / steps;
      const double v = std::exp(-z * z / (2 * cfg.sigma_z * cfg.sigma_z)) * std::cos(2 * std::numbers::pi * f0 * z);
      if (i > 1 && (v > 0) != (prev > 0)) ++changes;
      prev = v;
    }
    CHECK(changes == static_cast<int>(2 * cycles));
    // The discrete kernel agrees with the closed form at every tap.
    const Kernel2D k = build_psf(cfg);
    for (int z = -k.half_z; z <= k.half_z; ++z) {
      const double expect = std::exp(-z * z / (2 * cfg.sigma_z * cfg.sigma_z)) * std::cos(2 * std::numbers::pi * f0 * z);
      CHECK(k.at(0, z) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("scatter field") {
  const Image zero(16, 16, Domain::LinearAmplitude, 0.0f);
  const Image zero_field = scatter_field(zero, 1.0, 3);
  for (float v : zero_field.data()) CHECK(v == 0.0f);

  const Image one = ones(1000, 1000);
  const Image s = scatter_field(one, 2.0, 5);
  double m = 0, m2 = 0;
  for (float v : s.data()) m += v, m2 += static_cast<double>(v) * v;
  m /= static_cast<double>(s.size());
  const double sd = std::sqrt(m2 / static_cast<double>(s.size()) - m * m);
  CHECK(std::abs(sd - 2.0) / 2.0 < 0.01);

  const Image again = scatter_field(one, 2.0, 5);
  CHECK(std::equal(s.data().begin(), s.data().end(), again.data().begin()));

  // Values come from Rng(seed).normal() in row-major order.
  Rng rng(5);
  for (int i = 0; i < 10; ++i) CHECK(s.data()[static_cast<std::size_t>(i)] == static_cast<float>(2.0 * rng.normal()));
}

TEST_CASE("impulse echo reproduces the psf envelope") {
  SpeckleSimConfig cfg;
  const Kernel2D k = build_psf(cfg);
  const int w = 41, h = 64;
  Image field(w, h, Domain::LinearAmplitude, 0.0f);
  field.at(20, 32) = 1.0f;
  const auto rf = rf_signal(field, k);
  for (int z = -k.half_z; z <= k.half_z; ++z)
    for (int x = -k.half_x; x <= k.half_x; ++x)
      CHECK(rf[static_cast<std::size_t>(32 + z) * w + (20 + x)] == doctest::Approx(k.at(x, z)).epsilon(1e-12));

  // Envelope of the impulse response along the centre column equals the
  // envelope of the axial pulse itself.
  const Image env = envelope_detect(rf, w, h);
  std::vector<double> column(h);
  for (int z = 0; z < h; ++z) column[z] = rf[static_cast<std::size_t>(z) * w + 20];
  const auto a = analytic_signal(column);
  for (int z = 0; z < h; ++z) CHECK(env.at(20, z) == doctest::Approx(std::abs(a[z])).epsilon(1e-6));
  CHECK(env.at(20, 32) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("simulation rejects images shorter than the psf") {
  SpeckleSimConfig cfg;
  const int psf_h = build_psf(cfg).height();
  CHECK_THROWS_AS(simulate_bmode(ones(32, psf_h - 1), cfg), Error);
  CHECK_NOTHROW(simulate_bmode(ones(32, psf_h), cfg));
}

TEST_CASE("pre-log envelope follows Rayleigh statistics") {
  SpeckleSimConfig cfg;
  cfg.seed = 2024;
  const Image env = simulate_envelope(ones(256, 256), cfg);
  std::vector<double> centre;
  for (int z = 64; z < 192; ++z)
    for (int x = 64; x < 192; ++x) centre.push_back(env.at(x, z));
  const auto m = metrics::moments(centre);
  const double snr = m.mean / std::sqrt(m.variance);
  const double rayleigh = std::sqrt(std::numbers::pi / (4.0 - std::numbers::pi));
  CHECK(std::abs(snr - rayleigh) < 0.10);
}

TEST_CASE("dB output is invariant to echo scaling and deterministic") {
  SpeckleSimConfig cfg;
  const Image a = simulate_bmode(ones(64, 64), cfg);
  const Image b = simulate_bmode(Image(64, 64, Domain::LinearAmplitude, 3.5f), cfg);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-4);
  const Image c = simulate_bmode(ones(64, 64), cfg);
  CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST_CASE("different seeds decorrelate speckle while region means agree") {
  SpeckleSimConfig c1, c2;
  c1.seed = 1;
  c2.seed = 2;
  const Image a = simulate_bmode(ones(128, 128), c1);
  const Image b = simulate_bmode(ones(128, 128), c2);
  const Image ca = a.crop(16, 16, 96, 96);
  const Image cb = b.crop(16, 16, 96, 96);
  CHECK(std::abs(correlation(ca.data(), cb.data())) < 0.3);
  double ma = 0, mb = 0;
  for (float v : ca.data()) ma += v;
  for (float v : cb.data()) mb += v;
  CHECK(std::abs(ma - mb) / static_cast<double>(ca.size()) < 1.0);
}

TEST_CASE("make_realizations") {
  SpeckleSimConfig cfg;
  const Image echo = ones(64, 64);
  const auto r = make_realizations(echo, cfg, 2);
  REQUIRE(r.size() == 2);
  int differing = 0;
  for (std::size_t i = 0; i < r[0].size(); ++i) differing += r[0].data()[i] != r[1].data()[i];
  CHECK(differing > static_cast<int>(r[0].size()) * 9 / 10);
  double m0 = 0, m1 = 0;
  const Image c0 = r[0].crop(12, 12, 40, 40), c1 = r[1].crop(12, 12, 40, 40);
  for (float v : c0.data()) m0 += v;
  for (float v : c1.data()) m1 += v;
  CHECK(std::abs(m0 - m1) / static_cast<double>(c0.size()) < 1.0);

  const auto again = make_realizations(echo, cfg, 2, 2);
  for (int i = 0; i < 2; ++i)
    CHECK(std::equal(r[i].data().begin(), r[i].data().end(), again[i].data().begin()));
  CHECK_THROWS_AS(make_realizations(echo, cfg, 1), Error);

  // Realization i: seed ^ i, jitter factors from that stream.
  for (std::uint64_t i = 0; i < 4; ++i) {
    const SpeckleSimConfig ri = realization_config(cfg, i);
    Rng rng(cfg.seed ^ i);
    const double fx = rng.uniform(0.8, 1.25);
    const double fz = rng.uniform(0.8, 1.25);
    CHECK(ri.sigma_x == doctest::Approx(cfg.sigma_x * fx).epsilon(1e-15));
    CHECK(ri.sigma_z == doctest::Approx(cfg.sigma_z * fz).epsilon(1e-15));
    CHECK(ri.seed == rng.next_u64());
  }
}

TEST_CASE("degrade fixes constants and contracts around the mean") {
  BlurConfig cfg;
  const Image flat(32, 32, Domain::Display8, 77.0f);
  const Image d = degrade(flat, cfg);
  for (float v : d.data()) CHECK(v == doctest::Approx(77.0f).epsilon(1e-6));

  Image checker(8, 8, Domain::Display8);
  for (int z = 0; z < 8; ++z)
    for (int x = 0; x < 8; ++x) checker.at(x, z) = ((x + z) % 2) ? 255.0f : 0.0f;
  // sigma 0.3 has support +-1: per-axis taps a1, a0, a1. On a checkerboard
  // (which reflect padding continues exactly) the blurred extremes differ by
  // 255 (a0 - 2 a1)^2, and narrowing halves that around the mean.
  const double w1 = std::exp(-1.0 / (2 * 0.09));
  const double a0 = 1.0 / (1.0 + 2.0 * w1);
  const double a1 = w1 * a0;
  const Image n = degrade_with(checker, 0.3, 0.5);
  float lo = 255, hi = 0;
  for (float v : n.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  CHECK(hi - lo == doctest::Approx(0.5 * 255.0 * (a0 - 2 * a1) * (a0 - 2 * a1)).epsilon(1e-5));
  CHECK((hi + lo) / 2 == doctest::Approx(127.5).epsilon(1e-4));
}

TEST_CASE("degrade lowers the gradient of a thin bar") {
  // A monotone edge keeps its total variation under blur, so use a bar.
  Image step(32, 8, Domain::Display8, 40.0f);
  for (int z = 0; z < 8; ++z) step.at(15, z) = step.at(16, z) = 200.0f;
  const RoiSpec line{"line", 0, 4, 32, 5, RoiKind::LateralProfile};
  const double before = metrics::agm(metrics::extract_profile(step, line));
  const double after = metrics::agm(metrics::extract_profile(degrade_with(step, 0.3, 1.0), line));
  CHECK(after < before);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    BlurConfig cfg;
    cfg.seed = seed;
    CHECK(metrics::agm(metrics::extract_profile(degrade(step, cfg), line)) <= before);
  }
}
