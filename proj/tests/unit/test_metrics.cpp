#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "esrie/error.hpp"
#include "esrie/metrics.hpp"
#include "esrie/report.hpp"
#include "esrie/rng.hpp"

using namespace esrie;

namespace {

Image display(int w, int h, std::vector<float> v) { return Image(w, h, Domain::Display8, std::move(v)); }

// Direct transcription of the global SSIM formula, written independently of
// the library (two-pass moments in long double).
double ssim_oracle(const std::vector<double>& f, const std::vector<double>& g) {
  const long double n = static_cast<long double>(f.size());
  long double mf = 0, mg = 0;
  for (std::size_t i = 0; i < f.size(); ++i) mf += f[i], mg += g[i];
  mf /= n;
  mg /= n;
  long double vf = 0, vg = 0, cov = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    vf += (f[i] - mf) * (f[i] - mf);
    vg += (g[i] - mg) * (g[i] - mg);
    cov += (f[i] - mf) * (g[i] - mg);
  }
  vf /= n;
  vg /= n;
  cov /= n;
  const long double c1 = 6.5025L, c2 = 58.5225L;
  return static_cast<double>((2 * mf * mg + c1) * (2 * cov + c2) / ((mf * mf + mg * mg + c1) * (vf + vg + c2)));
}

}  // namespace

TEST_CASE("cnr hand example") {
  const Image img = display(4, 2, {12, 8, 12, 8, 2, 2, 2, 2});
  const RoiSpec bg{"bg", 0, 0, 4, 1, RoiKind::Region};
  const RoiSpec cy{"cy", 0, 1, 4, 2, RoiKind::Region};
  CHECK(std::abs(metrics::cnr(img, bg, cy) - 20.0 * std::log10(4.0)) < 1e-9);
  CHECK(std::abs(metrics::cnr(img, bg, cy) - metrics::cnr(img, cy, bg)) < 1e-12);
}

TEST_CASE("cnr degenerate cases") {
  const Image flat = display(4, 2, std::vector<float>(8, 5.0f));
  const RoiSpec a{"a", 0, 0, 4, 1, RoiKind::Region};
  const RoiSpec b{"b", 0, 1, 4, 2, RoiKind::Region};
  try {
    metrics::cnr(flat, a, b);
    FAIL("expected ZeroDenominator");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroDenominator);
  }
  const Image same_mean = display(4, 2, {1, 3, 1, 3, 3, 1, 3, 1});
  CHECK(metrics::cnr(same_mean, a, b) == -std::numeric_limits<double>::infinity());
  const RoiSpec line{"l", 0, 0, 4, 1, RoiKind::LateralProfile};
  CHECK_THROWS_AS(metrics::cnr(same_mean, line, b), Error);
}

TEST_CASE("cnr is invariant under additive shifts") {
  Rng rng(5);
  std::vector<float> v(64);
  for (auto& x : v) x = static_cast<float>(std::round(rng.uniform(0, 200)));
  std::vector<float> shifted(v);
  for (auto& x : shifted) x += 40.0f;
  const RoiSpec a{"a", 0, 0, 8, 4, RoiKind::Region};
  const RoiSpec b{"b", 0, 4, 8, 8, RoiKind::Region};
  CHECK(metrics::cnr(display(8, 8, v), a, b) == doctest::Approx(metrics::cnr(display(8, 8, shifted), a, b)).epsilon(1e-9));
}

TEST_CASE("ssnr and enl hand examples") {
  const Image img = display(2, 1, {1, 3});
  const RoiSpec r{"r", 0, 0, 2, 1, RoiKind::Region};
  CHECK(std::abs(metrics::ssnr(img, r) - 2.0) < 1e-9);
  CHECK(std::abs(metrics::enl(img, r) - 4.0) < 1e-9);
  const Image flat = display(2, 1, {3, 3});
  CHECK_THROWS_AS(metrics::ssnr(flat, r), Error);
  CHECK_THROWS_AS(metrics::enl(flat, r), Error);
}

TEST_CASE("enl equals ssnr squared on random regions") {
  Rng rng(17);
  std::vector<float> v(64 * 64);
  for (auto& x : v) x = static_cast<float>(std::round(rng.uniform(0, 255)));
  const Image img = display(64, 64, v);
  for (int i = 0; i < 1000; ++i) {
    const int x0 = static_cast<int>(rng.below(60));
    const int z0 = static_cast<int>(rng.below(60));
    const int x1 = x0 + 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(63 - x0)));
    const int z1 = z0 + 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(63 - z0)));
    const RoiSpec r{"r", x0, z0, std::min(x1, 64), std::min(z1, 64), RoiKind::Region};
    const double s = metrics::ssnr(img, r);
    CHECK(std::abs(metrics::enl(img, r) - s * s) <= 1e-12 * s * s);
  }
}

TEST_CASE("agm examples and invariances") {
  CHECK(metrics::agm(std::vector<double>{0, 2, 1}) == 1.5);
  CHECK(metrics::agm(std::vector<double>{4, 4, 4, 4}) == 0.0);
  CHECK(metrics::agm(std::vector<double>{0, 1, 0, 1}) == 1.0);
  CHECK_THROWS_AS(metrics::agm(std::vector<double>{1}), Error);
  std::vector<double> p{3, 9, 1, 4, 4, 7};
  std::vector<double> rev(p.rbegin(), p.rend());
  std::vector<double> up(p);
  for (auto& x : up) x += 11;
  CHECK(metrics::agm(p) == metrics::agm(rev));
  CHECK(metrics::agm(p) == metrics::agm(up));
}

TEST_CASE("ssim identities and hand example") {
  Rng rng(23);
  std::vector<float> v(100);
  for (auto& x : v) x = static_cast<float>(std::round(rng.uniform(0, 255)));
  const Image f = display(10, 10, v);
  CHECK(metrics::ssim(f, f) == 1.0);

  const Image zeros = display(3, 3, std::vector<float>(9, 0.0f));
  const Image ones = display(3, 3, std::vector<float>(9, 1.0f));
  CHECK(std::abs(metrics::ssim(zeros, ones) - 6.5025 / 7.5025) < 1e-12);
  CHECK(metrics::ssim(zeros, ones) == metrics::ssim(ones, zeros));
  CHECK_THROWS_AS(metrics::ssim(zeros, display(9, 1, std::vector<float>(9, 0.0f))), Error);
}

TEST_CASE("ssim matches the direct formula oracle") {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> f(256), g(256);
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = std::round(rng.uniform(0, 255));
      g[i] = std::min(255.0, f[i] + 50.0);
    }
    const double lib = metrics::ssim(f, g);
    CHECK(std::abs(lib - ssim_oracle(f, g)) < 1e-12);
    CHECK(lib <= 1.0);
  }
}

TEST_CASE("profile extraction") {
  const Image img = display(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto row = metrics::extract_profile(img, {"p", 0, 1, 4, 2, RoiKind::LateralProfile});
  CHECK(row == std::vector<double>{5, 6, 7, 8});
  const Image col = display(1, 4, {0, 1, 2, 3});
  CHECK(metrics::extract_profile(col, {"c", 0, 0, 1, 4, RoiKind::AxialProfile}) == std::vector<double>{0, 1, 2, 3});
  CHECK_THROWS_AS(metrics::extract_profile(img, {"r", 0, 0, 2, 2, RoiKind::Region}), Error);

  Image step(16, 3, Domain::Display8);
  for (int z = 0; z < 3; ++z)
    for (int x = 0; x < 16; ++x) step.at(x, z) = x < 9 ? 10.0f : 90.0f;
  const auto p = metrics::extract_profile(step, {"s", 0, 1, 16, 2, RoiKind::LateralProfile});
  int nonzero = 0;
  for (std::size_t i = 1; i < p.size(); ++i) nonzero += p[i] != p[i - 1];
  CHECK(nonzero == 1);
}

TEST_CASE("report renderings") {
  metrics::MetricReport r;
  r.image_id = "cyst2";
  r.method = "input";
  r.background_roi = "background";
  r.cyst_roi = "cyst";
  r.profile_roi = "lateral";
  r.cnr = 11.691;
  r.ssnr = 6.5;
  r.enl = 42.25;
  r.agm = 3.0;
  r.ssim = 1.0;
  const std::string csv = metrics::render_csv({r});
  CHECK(csv.find("cyst2") != std::string::npos);
  CHECK(csv.back() == '\n');
  CHECK(csv.find('\r') == std::string::npos);
  const std::string table = metrics::render_table({r});
  CHECK(table.find("11.69") != std::string::npos);
  CHECK(table.find("1.00") != std::string::npos);
  const std::string rec = metrics::render_records({r});
  CHECK(rec.find("method=input") != std::string::npos);
}
