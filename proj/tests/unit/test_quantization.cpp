#include <doctest.h>

#include <cmath>
#include <tuple>

#include "esrie/error.hpp"
#include "esrie/network.hpp"
#include "esrie/quantization.hpp"
#include "esrie/rng.hpp"
#include "esrie/training.hpp"

using namespace esrie;
using namespace esrie::quant;

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

Image random_image(int w, int h, Rng& rng) {
  Image img(w, h, Domain::Display8);
  for (auto& v : img.data()) v = static_cast<float>(rng.below(256));
  return img;
}

// Input -> 3x3 conv (1 -> 1) -> Output, on both branches.
net::Model toy_model(Rng& rng, float bias) {
  net::BranchDescriptor d{{{net::LayerKind::Input, {1, 0, 0, 0}},
                           {net::LayerKind::Conv3x3, {1, 1, 3, 3}},
                           {net::LayerKind::Output, {0, 0, 0, 0}}}};
  net::Model m;
  m.descriptor = {d, d};
  m.despeckle = net::zero_params<float>(d);
  for (auto& w : m.despeckle.layers[0].weight.storage()) w = static_cast<float>(rng.uniform(-0.1, 0.3));
  m.despeckle.layers[0].bias[0] = bias;
  m.deblur = m.despeckle;
  return m;
}

net::Model quantized(const net::Model& m, std::span<const Image> calib) {
  return quantize_model(m, choose_quant_params(m, calibrate(m, calib)));
}

}  // namespace

TEST_CASE("weight quantization examples") {
  const std::vector<float> w{-1.0f, 0.5f, 1.0f};
  const QuantizedTensor q = quantize_weights(w);
  CHECK(q.scale == doctest::Approx(1.0 / 127.0).epsilon(1e-7));
  CHECK(q.q == std::vector<std::int8_t>{-127, 64, 127});

  const QuantizedTensor z = quantize_weights(std::vector<float>(5, 0.0f));
  CHECK(z.scale == 1.0f);
  for (auto v : z.q) CHECK(v == 0);

  CHECK(code_of([] { quantize_weights(std::vector<float>{1.0f, std::nanf("")}); }) == ErrorCode::NonFiniteWeights);
}

TEST_CASE("dequantization error is at most half a step, exhaustively") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> w(1 + rng.below(2000));
    const double span = std::exp(rng.uniform(-8, 3));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-span, span));
    const QuantizedTensor q = quantize_weights(w);
    const auto back = dequantize(q);
    for (std::size_t i = 0; i < w.size(); ++i)
      CHECK(std::abs(static_cast<double>(w[i]) - back[i]) <= q.scale / 2.0 * (1 + 1e-6));
  }
  const net::Model m = net::build_default(1);
  for (const auto& l : m.despeckle.layers) {
    const QuantizedTensor q = quantize_weights(l.weight.storage());
    const auto back = dequantize(q);
    for (std::size_t i = 0; i < back.size(); ++i)
      CHECK(std::abs(static_cast<double>(l.weight.storage()[i]) - back[i]) <= q.scale / 2.0 * (1 + 1e-6));
  }
}

TEST_CASE("activation parameter rules") {
  const ActivationQuant unit = choose_activation_quant(0.0f, 1.0f);
  CHECK(unit.scale == doctest::Approx(1.0 / 255.0).epsilon(1e-7));
  CHECK(unit.zero_point == 0);

  const ActivationQuant pos = choose_activation_quant(3.0f, 3.0f);
  CHECK(pos.scale == doctest::Approx(3.0 / 255.0).epsilon(1e-7));
  CHECK(pos.zero_point == 0);
  const ActivationQuant small = choose_activation_quant(-0.5f, -0.5f);
  CHECK(small.scale == doctest::Approx(1.0 / 255.0).epsilon(1e-7));
  CHECK(small.zero_point == 255);

  const ActivationQuant mixed = choose_activation_quant(-1.0f, 3.0f);
  CHECK(mixed.scale == doctest::Approx(4.0 / 255.0).epsilon(1e-7));
  CHECK(mixed.zero_point == 64);
  CHECK(mixed.lo() <= -1.0f + mixed.scale);
  CHECK(mixed.hi() >= 3.0f - mixed.scale);

  bool inside = false;
  CHECK(fake_quant(0.0f, mixed, inside) == 0.0f);
  CHECK(inside);
  fake_quant(10.0f, mixed, inside);
  CHECK(!inside);

  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const float v = static_cast<float>(rng.uniform(-1.0, 3.0));
    CHECK(std::abs(fake_quant(v, mixed, inside) - v) <= mixed.scale * 0.5 + 1e-6);
  }
}

TEST_CASE("fixed-point multipliers") {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double M = std::exp(rng.uniform(-20, 3));
    const FixedMultiplier f = FixedMultiplier::from_real(M);
    CHECK(f.m >= (std::int64_t{1} << 30));
    CHECK(f.m < (std::int64_t{1} << 31));
    CHECK(std::abs(f.real() - M) / M < std::ldexp(1.0, -15));
  }
  const FixedMultiplier half = FixedMultiplier::from_real(0.5);
  CHECK(half.apply(3) == 2);
  CHECK(half.apply(-3) == -2);
  CHECK(half.apply(4) == 2);
  CHECK(rounding_shift(5, 1) == 3);
  CHECK(rounding_shift(-5, 1) == -3);
  CHECK(rounding_shift(3, -2) == 12);
  CHECK_THROWS_AS(FixedMultiplier::from_real(0.0), Error);
}

TEST_CASE("calibration ranges grow monotonically and merge associatively") {
  const net::Model m = net::build_default(1);
  Rng rng(4);
  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(32, 32, rng));
  const CalibrationStats a = calibrate(m, std::span(imgs).first(2));
  const CalibrationStats all = calibrate(m, imgs);
  CHECK(all.samples == 4);
  REQUIRE(a.despeckle.min.size() == all.despeckle.min.size());
  for (std::size_t i = 0; i < a.despeckle.min.size(); ++i) {
    CHECK(all.despeckle.min[i] <= a.despeckle.min[i]);
    CHECK(all.despeckle.max[i] >= a.despeckle.max[i]);
    CHECK(a.despeckle.min[i] <= a.despeckle.max[i]);
  }
  CalibrationStats merged = a;
  merged.merge(calibrate(m, std::span(imgs).subspan(2)));
  CHECK(merged.despeckle.min == all.despeckle.min);
  CHECK(merged.despeckle.max == all.despeckle.max);
  CHECK(merged.deblur.max == all.deblur.max);
  CHECK(merged.samples == 4);
  CHECK(code_of([&] { calibrate(m, std::span<const Image>{}); }) == ErrorCode::EmptyCalibrationSet);
}

TEST_CASE("activation owners tie concat operands") {
  const auto d = net::default_descriptor(8, 4).despeckle;
  const auto owners = activation_owners(d);
  REQUIRE(owners.size() == d.layers.size());
  CHECK(owners.front() == -1);
  CHECK(owners.back() == -1);
  const QuantParams qp = choose_quant_params(net::build_default(1), calibrate(net::build_default(1), std::vector<Image>{
                                                                                                       Image(32, 32, Domain::Display8)}));
  CHECK(qp.despeckle.front() == kDisplayQuant);
  CHECK(qp.despeckle.back() == kDisplayQuant);
  // Every concat's output scale equals both operand scales.
  std::vector<std::size_t> skips;
  for (std::size_t i = 1; i < d.layers.size(); ++i) {
    if (d.layers[i].kind == net::LayerKind::MaxPool2) {
      skips.push_back(i - 1);
      CHECK(qp.despeckle[i] == qp.despeckle[i - 1]);
    }
    if (d.layers[i].kind == net::LayerKind::Concat) {
      const std::size_t skip = skips.back();
      skips.pop_back();
      CHECK(qp.despeckle[i] == qp.despeckle[skip]);
      CHECK(qp.despeckle[i] == qp.despeckle[i - 1]);
    }
  }
}

TEST_CASE("toy model: integer path matches the float path") {
  Rng rng(5);
  const net::Model m = toy_model(rng, 0.05f);
  std::vector<Image> calib;
  for (int i = 0; i < 4; ++i) calib.push_back(random_image(24, 24, rng));
  const net::Model q = quantized(m, calib);
  CHECK(q.precision == net::Precision::Int8Quantized);
  std::size_t agree = 0, total = 0;
  for (int i = 0; i < 8; ++i) {
    const Image img = random_image(24, 24, rng);
    const Image f = net::forward(q, img, net::Branch::Despeckle);
    const Image g = quantized_forward(q, img, net::Branch::Despeckle);
    for (std::size_t j = 0; j < f.size(); ++j) agree += f.data()[j] == g.data()[j];
    total += f.size();
  }
  CHECK(static_cast<double>(agree) >= 0.99 * static_cast<double>(total));
  for (const auto& [realized, real] : IntegerBranch::compile(q, net::Branch::Despeckle).multipliers())
    CHECK(std::abs(realized - real) / real < std::ldexp(1.0, -15));
}

TEST_CASE("all-zero input yields the bias-driven constant on both paths") {
  Rng rng(6);
  const net::Model m = toy_model(rng, 0.2f);
  std::vector<Image> calib{random_image(16, 16, rng)};
  const net::Model q = quantized(m, calib);
  const Image zeros(16, 16, Domain::Display8);
  const Image f = net::forward(q, zeros, net::Branch::Despeckle);
  const Image g = quantized_forward(q, zeros, net::Branch::Despeckle);
  for (std::size_t j = 0; j < f.size(); ++j) {
    CHECK(f.data()[j] == 51.0f);
    CHECK(g.data()[j] == 51.0f);
  }
}

TEST_CASE("default model: integer path close to float, payload a quarter") {
  const net::Model m = net::build_default(1);
  Rng rng(7);
  std::vector<Image> calib;
  for (int i = 0; i < 4; ++i) calib.push_back(random_image(32, 32, rng));
  const net::Model q = quantized(m, calib);
  CHECK(net::weight_payload_bytes(q) * 4 == net::weight_payload_bytes(m));
  for (const auto& [realized, real] : IntegerBranch::compile(q, net::Branch::Despeckle).multipliers())
    CHECK(std::abs(realized - real) / real < std::ldexp(1.0, -15));

  const Image img = random_image(32, 32, rng);
  const Image f = net::forward(q, img, net::Branch::Fused);
  const Image g = quantized_forward(q, img, net::Branch::Fused);
  double mean = 0;
  for (std::size_t j = 0; j < f.size(); ++j) mean += std::abs(f.data()[j] - g.data()[j]);
  mean /= static_cast<double>(f.size());
  CHECK(mean <= 8.0);  // untrained weights; the trained bound lives in the acceptance run

  const auto bytes = net::encode_model(q);
  const net::Model back = net::decode_model(bytes);
  CHECK(back.precision == net::Precision::Int8Quantized);
  CHECK(net::encode_model(back) == bytes);
  const Image g2 = quantized_forward(back, img, net::Branch::Fused);
  CHECK(std::equal(g.data().begin(), g.data().end(), g2.data().begin()));

  CHECK(code_of([&] { quantized_forward(m, img, net::Branch::Despeckle); }) == ErrorCode::MissingQuantParams);
}

TEST_CASE("fake-quant forward stays within one step of the float value per quantized element") {
  const net::Model m = net::build_default(2);
  Rng rng(8);
  std::vector<Image> calib{random_image(32, 32, rng)};
  const QuantParams qp = choose_quant_params(m, calibrate(m, calib));
  const auto& d = m.descriptor.deblur;
  const auto input = net::image_to_tensor(calib[0]);
  net::BranchTrace<float> plain;
  net::run_branch<float>(d, m.deblur, input, &plain);
  for (std::size_t layer = 1; layer + 1 < d.layers.size(); ++layer) {
    if (d.layers[layer].kind != net::LayerKind::LeakyReLU) continue;
    net::FakeQuant fq;
    fq.activations.resize(d.layers.size());
    fq.activations[layer] = qp.deblur[layer];
    net::BranchTrace<float> faked;
    net::run_branch<float>(d, m.deblur, input, &faked, &fq);
    const auto& a = plain.outputs[layer].storage();
    const auto& b = faked.outputs[layer].storage();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= qp.deblur[layer].scale * 1.0f);
  }
}

TEST_CASE("quantization-aware fine-tuning") {
  const training::Corpus corpus = training::synthetic_corpus(2, 64, 3);
  const net::Model m = net::build_default(1);
  std::vector<Image> calib{corpus.deblur[0].image, corpus.deblur[1].image};
  const QuantParams qp = choose_quant_params(m, calibrate(m, calib));
  QatConfig cfg;
  cfg.train.batch_size = 2;
  cfg.train.patch_size = 32;
  cfg.validation_pairs = 2;

  cfg.steps = 0;
  const QatResult none = qat_finetune(m, qp, corpus, cfg);
  CHECK(net::encode_model(none.model) == net::encode_model(m));
  CHECK(none.despeckle_loss_after == none.despeckle_loss_before);

  cfg.steps = 6;
  cfg.eval_every = 2;
  const QatResult r = qat_finetune(m, qp, corpus, cfg);
  CHECK(r.despeckle_loss_after <= r.despeckle_loss_before);
  CHECK(r.deblur_loss_after <= r.deblur_loss_before);
  CHECK(r.model.precision == net::Precision::Float32);
  const double check = integer_path_loss(quantize_model(r.model, qp), net::Branch::Deblur, {});
  CHECK(check == 0.0);
}

TEST_CASE("wide and portable integer kernels agree bit for bit") {
  Rng rng(11);
  net::Model m = net::build_default(4);
  for (auto b : {net::Branch::Despeckle, net::Branch::Deblur})
    for (auto& l : (b == net::Branch::Despeckle ? m.despeckle : m.deblur).layers)
      for (auto& v : l.bias) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  std::vector<Image> calib;
  for (int i = 0; i < 3; ++i) calib.push_back(random_image(48, 48, rng));
  const net::Model q = quantized(m, calib);
  const IntegerProgram program = IntegerProgram::compile(q);
  const std::vector<std::tuple<int, int, net::Branch>> cases = {
      {48, 80, net::Branch::Fused}, {37, 23, net::Branch::Deblur}, {16, 16, net::Branch::Despeckle}};
  for (const auto& [w, h, branch] : cases) {
    const Image img = random_image(w, h, rng);
    use_portable_integer_kernels(true);
    const Image portable = program.run(img, branch);
    use_portable_integer_kernels(false);
    const Image wide = program.run(img, branch);
    CHECK(std::equal(portable.data().begin(), portable.data().end(), wide.data().begin()));
  }
  MESSAGE("wide kernels " << (wide_integer_kernels_available() ? "available" : "unavailable"));
}
