#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "esrie/error.hpp"
#include "esrie/image_io.hpp"
#include "esrie/network.hpp"
#include "esrie/rng.hpp"

using namespace esrie;
using namespace esrie::net;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an esrie::Error");
  return ErrorCode::InvalidConfig;
}

LayerSpec conv3(std::uint32_t out, std::uint32_t in) { return {LayerKind::Conv3x3, {out, in, 3, 3}}; }

// Conv MACs of the default layout computed level by level.
std::uint64_t default_flops_oracle(int C, int depth, std::uint64_t h, std::uint64_t w) {
  std::uint64_t macs = 0;
  const std::uint64_t c = static_cast<std::uint64_t>(C);
  for (int l = 0; l < depth; ++l) {
    const std::uint64_t px = (h >> l) * (w >> l);
    macs += 9 * ((l == 0 ? 1 : c) * c + c * c) * px;  // encoder pair
    macs += c * c * px;                                // upconv into this level
    macs += 9 * 2 * c * c * px;                        // decoder conv after concat
  }
  macs += 2 * 9 * c * c * (h >> depth) * (w >> depth);  // bottleneck
  macs += c * h * w;                                     // 1x1 head
  macs += 9 * (c + 4 * c * c + c) * h * w;               // deblur
  return 2 * macs;
}

Image ramp(int w, int h) {
  Image img(w, h, Domain::Display8);
  for (int z = 0; z < h; ++z)
    for (int x = 0; x < w; ++x) img.at(x, z) = static_cast<float>((x * 7 + z * 3) % 256);
  return img;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "esrie_test_network";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("default model budget and layout") {
  const Model m = build_default(1);
  CHECK(param_count(m) <= kParamBudget);
  CHECK(param_count(m) == 13530);
  CHECK(param_count(m.descriptor.despeckle) + param_count(m.descriptor.deblur) == param_count(m));

  int deblur_blocks = 0;
  const auto& db = m.descriptor.deblur.layers;
  for (std::size_t i = 0; i + 1 < db.size(); ++i)
    deblur_blocks += db[i].kind == LayerKind::Conv3x3 && db[i + 1].kind == LayerKind::LeakyReLU;
  CHECK(deblur_blocks == 5);
  CHECK(m.descriptor.channel_width() == 8);
  CHECK(m.descriptor.depth_levels() == 4);
  CHECK(m.descriptor.despeckle.spatial_multiple() == 16);
  CHECK_NOTHROW(m.descriptor.despeckle.validate());
  CHECK_NOTHROW(m.descriptor.deblur.validate());
}

TEST_CASE("single layer counts") {
  CHECK(nn::ConvParams<float>::zeros(8, 1, 3, 3).param_count() == 80);
  BranchDescriptor one{{{LayerKind::Input, {8, 0, 0, 0}}, conv3(8, 8)}};
  CHECK(flop_count(one, 16, 16) == 294912);
  CHECK(param_count(one) == 8 * 8 * 9 + 8);
}

TEST_CASE("flop count matches the per-level oracle") {
  const Model m = build_default(1);
  for (int s : {16, 64, 256})
    CHECK(flop_count(m, s, s) == default_flops_oracle(8, 4, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(s)));
  CHECK(flop_count(m, 64, 32) == default_flops_oracle(8, 4, 64, 32));
}

TEST_CASE("he-uniform initialization") {
  const Model m = build_default(3);
  for (auto branch : {Branch::Despeckle, Branch::Deblur}) {
    const auto& layers = m.params_of(branch).layers;
    REQUIRE(!layers.empty());
    for (const auto& p : layers) {
      const bool up = p.kh() == 2;
      const double fan_in = up ? p.in_c() : static_cast<double>(p.in_c()) * p.kh() * p.kw();
      const double bound = std::sqrt(6.0 / fan_in);
      for (float w : p.weight.storage()) CHECK(std::abs(w) <= bound);
      for (float b : p.bias) CHECK(b == 0.0f);
    }
  }
  const Model same = build_default(3);
  CHECK(same.despeckle.layers[0].weight.storage() == m.despeckle.layers[0].weight.storage());
  CHECK(build_default(4).despeckle.layers[0].weight.storage() != m.despeckle.layers[0].weight.storage());
}

TEST_CASE("descriptor validation") {
  auto d = default_descriptor(8, 4).despeckle;
  d.layers.erase(std::find_if(d.layers.begin(), d.layers.end(),
                              [](const LayerSpec& l) { return l.kind == LayerKind::UpConv2x2; }));
  CHECK(code_of([&] { d.validate(); }) == ErrorCode::DescriptorMismatch);
  BranchDescriptor wrong{{{LayerKind::Input, {1, 0, 0, 0}}, conv3(8, 2), {LayerKind::Output, {}}}};
  CHECK(code_of([&] { wrong.validate(); }) == ErrorCode::DescriptorMismatch);
  BranchDescriptor multi{{{LayerKind::Input, {1, 0, 0, 0}}, conv3(2, 1), {LayerKind::Output, {}}}};
  CHECK(code_of([&] { multi.validate(); }) == ErrorCode::DescriptorMismatch);
}

TEST_CASE("forward smoke on zeros") {
  const Model m = build_default(1);
  for (auto b : {Branch::Despeckle, Branch::Deblur}) {
    const nn::Tensor4 out = run_branch<float>(m.descriptor_of(b), m.params_of(b), nn::Tensor4(1, 1, 64, 64));
    CHECK(out.shape() == nn::Shape4{1, 1, 64, 64});
    for (float v : out.storage()) CHECK(std::isfinite(v));
  }
  for (auto b : {Branch::Despeckle, Branch::Deblur, Branch::Fused}) {
    const Image out = forward(m, ramp(64, 48), b);
    CHECK(out.width() == 64);
    CHECK(out.height() == 48);
    CHECK(out.domain() == Domain::Display8);
    for (float v : out.data()) CHECK((v >= 0.0f && v <= 255.0f && v == std::round(v)));
  }
}

TEST_CASE("padding path") {
  const Model m = build_default(1);
  const Image img = ramp(100, 100);
  const Image padded = pad_to_multiple(img, 16);
  CHECK(padded.width() == 112);
  CHECK(padded.height() == 112);
  CHECK(padded.at(100, 5) == img.at(98, 5));
  const Image out = forward(m, img, Branch::Despeckle);
  CHECK(out.width() == 100);
  CHECK(out.height() == 100);
  const Image via_pad = forward(m, padded, Branch::Despeckle).crop(0, 0, 100, 100);
  CHECK(std::equal(out.data().begin(), out.data().end(), via_pad.data().begin()));
  CHECK(code_of([&] { forward(m, img, Branch::Despeckle, {false, nullptr}); }) == ErrorCode::NonDivisibleDims);
  CHECK_NOTHROW(forward(m, img, Branch::Deblur, {false, nullptr}));
}

TEST_CASE("fused equals deblur after despeckle, deterministically") {
  const Model m = build_default(2);
  const Image img = ramp(32, 32);
  const Image fused = forward(m, img, Branch::Fused);
  const Image chained = forward(m, forward(m, img, Branch::Despeckle), Branch::Deblur);
  CHECK(std::equal(fused.data().begin(), fused.data().end(), chained.data().begin()));
  const Image again = forward(m, img, Branch::Fused);
  CHECK(std::equal(fused.data().begin(), fused.data().end(), again.data().begin()));
}

TEST_CASE("branch backward matches finite differences in double") {
  const auto arch = default_descriptor(2, 2);
  for (const BranchDescriptor* d : {&arch.despeckle, &arch.deblur}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(derive_seed(seed, 0xb4));
      BranchParams<double> p = zero_params<double>(*d);
      for (auto& l : p.layers) {
        for (auto& v : l.weight.storage()) v = rng.uniform(-0.7, 0.7);
        for (auto& v : l.bias) v = rng.uniform(-0.2, 0.2);
      }
      nn::Tensor4d x(1, 1, 8, 8);
      for (auto& v : x.storage()) v = rng.uniform(0, 1);
      nn::Tensor4d r(1, 1, 8, 8);
      for (auto& v : r.storage()) v = rng.uniform(-1, 1);

      BranchTrace<double> trace;
      run_branch<double>(*d, p, x, &trace);
      const BranchParams<double> g = backward_branch<double>(*d, p, trace, r);
      REQUIRE(g.layers.size() == p.layers.size());

      auto loss = [&] {
        const nn::Tensor4d y = run_branch<double>(*d, p, x);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.storage()[i] * r.storage()[i];
        return s;
      };
      double worst = 0;
      for (std::size_t li = 0; li < p.layers.size(); ++li) {
        auto check = [&](double& v, double analytic) {
          const double saved = v;
          v = saved + 1e-5;
          const double up = loss();
          v = saved - 1e-5;
          const double down = loss();
          v = saved;
          const double num = (up - down) / 2e-5;
          worst = std::max(worst, std::abs(num - analytic) / std::max({std::abs(num), std::abs(analytic), 1e-6}));
        };
        auto& w = p.layers[li].weight.storage();
        for (std::size_t i = 0; i < w.size(); i += 3) check(w[i], g.layers[li].weight.storage()[i]);
        for (std::size_t i = 0; i < p.layers[li].bias.size(); ++i) check(p.layers[li].bias[i], g.layers[li].bias[i]);
      }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("checkpoint round-trip is bit-identical") {
  Model m = build_default(5);
  m.fused = true;
  const auto path = temp_path("model.esnn");
  save(m, path);
  const Model back = load(path);
  CHECK(back.descriptor == m.descriptor);
  CHECK(back.fused);
  CHECK(back.precision == Precision::Float32);
  for (auto b : {Branch::Despeckle, Branch::Deblur}) {
    const auto& x = m.params_of(b).layers;
    const auto& y = back.params_of(b).layers;
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(std::memcmp(x[i].weight.data(), y[i].weight.data(), x[i].weight.size() * sizeof(float)) == 0);
      CHECK(x[i].bias == y[i].bias);
    }
  }
  CHECK(encode_model(back) == encode_model(m));
  std::size_t weights = 0;
  for (auto b : {Branch::Despeckle, Branch::Deblur})
    for (const auto& l : m.params_of(b).layers) weights += l.weight.size();
  CHECK(weight_payload_bytes(m) == weights * sizeof(float));
}

TEST_CASE("checkpoint corruption is detected") {
  const auto bytes = encode_model(build_default(1));
  auto decode = [](std::vector<std::uint8_t> b) { return decode_model(b); };

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  const ErrorCode t = code_of([&] { decode(truncated); });
  CHECK((t == ErrorCode::ChecksumError || t == ErrorCode::TruncatedFile));

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK(code_of([&] { decode(flipped); }) == ErrorCode::ChecksumError);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(code_of([&] { decode(magic); }) == ErrorCode::BadMagic);

  auto version = bytes;
  version[5] = 9;
  CHECK(code_of([&] { decode(version); }) == ErrorCode::VersionMismatch);

  CHECK(code_of([&] { decode({'E', 'S', 'N'}); }) == ErrorCode::TruncatedFile);
}
