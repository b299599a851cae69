#include "esrie/network.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <type_traits>

#include "esrie/error.hpp"
#include "esrie/rng.hpp"
#include "esrie/rounding.hpp"

namespace esrie::net {

using nn::BasicTensor4;
using nn::ConvParams;

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return "Input";
    case LayerKind::Conv3x3: return "Conv3x3";
    case LayerKind::Conv1x1: return "Conv1x1";
    case LayerKind::UpConv2x2: return "UpConv2x2";
    case LayerKind::MaxPool2: return "MaxPool2";
    case LayerKind::LeakyReLU: return "LeakyReLU";
    case LayerKind::Concat: return "Concat";
    case LayerKind::Output: return "Output";
  }
  return "?";
}

std::string_view to_string(Branch b) {
  switch (b) {
    case Branch::Despeckle: return "despeckle";
    case Branch::Deblur: return "deblur";
    case Branch::Fused: return "fused";
  }
  return "?";
}

Branch parse_branch(std::string_view text) {
  if (text == "despeckle") return Branch::Despeckle;
  if (text == "deblur") return Branch::Deblur;
  if (text == "fused") return Branch::Fused;
  throw Error(ErrorCode::InvalidConfig, "unknown branch '" + std::string(text) + "'");
}

std::size_t BranchDescriptor::param_layer_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.has_params() ? 1 : 0;
  return n;
}

int BranchDescriptor::spatial_multiple() const {
  int m = 1;
  for (const auto& l : layers)
    if (l.kind == LayerKind::MaxPool2) m *= 2;
  return m;
}

void BranchDescriptor::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::DescriptorMismatch, why); };
  if (layers.size() < 2 || layers.front().kind != LayerKind::Input || layers.back().kind != LayerKind::Output)
    fail("branch must start with Input and end with Output");
  int channels = static_cast<int>(layers.front().extents[0]);
  int depth = 0;
  std::vector<int> skips;
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
      case LayerKind::UpConv2x2: {
        const std::uint32_t k = l.kind == LayerKind::Conv3x3 ? 3 : (l.kind == LayerKind::Conv1x1 ? 1 : 2);
        if (l.extents[2] != k || l.extents[3] != k) fail("layer " + std::to_string(i) + ": kernel extents do not match kind");
        if (static_cast<int>(l.extents[1]) != channels) fail("layer " + std::to_string(i) + ": input channel mismatch");
        if (l.extents[0] == 0) fail("layer " + std::to_string(i) + ": zero output channels");
        channels = static_cast<int>(l.extents[0]);
        if (l.kind == LayerKind::UpConv2x2) --depth;
        break;
      }
      case LayerKind::MaxPool2:
        skips.push_back(channels);
        ++depth;
        break;
      case LayerKind::Concat:
        if (skips.empty()) fail("layer " + std::to_string(i) + ": Concat without a pending skip");
        channels += skips.back();
        skips.pop_back();
        break;
      case LayerKind::LeakyReLU: break;
      case LayerKind::Output:
        if (i + 1 != layers.size()) fail("Output must be the last layer");
        if (channels != 1) fail("branch must end with one channel");
        break;
      case LayerKind::Input: fail("Input may only appear first");
    }
    if (depth < 0) fail("more upsampling than downsampling");
  }
  if (!skips.empty() || depth != 0) fail("unbalanced encoder/decoder");
}

int ArchitectureDescriptor::channel_width() const {
  for (const auto& l : despeckle.layers)
    if (l.has_params()) return static_cast<int>(l.extents[0]);
  return 0;
}

int ArchitectureDescriptor::depth_levels() const {
  int d = 0;
  for (const auto& l : despeckle.layers) d += l.kind == LayerKind::MaxPool2 ? 1 : 0;
  return d;
}

ArchitectureDescriptor default_descriptor(int channels, int depth) {
  const auto C = static_cast<std::uint32_t>(channels);
  auto conv3 = [](std::uint32_t out, std::uint32_t in) { return LayerSpec{LayerKind::Conv3x3, {out, in, 3, 3}}; };
  const LayerSpec lrelu{LayerKind::LeakyReLU, {}};

  ArchitectureDescriptor a;
  auto& ds = a.despeckle.layers;
  ds.push_back({LayerKind::Input, {1, 0, 0, 0}});
  std::uint32_t in = 1;
  for (int level = 0; level < depth; ++level) {
    ds.insert(ds.end(), {conv3(C, in), lrelu, conv3(C, C), lrelu, LayerSpec{LayerKind::MaxPool2, {}}});
    in = C;
  }
  ds.insert(ds.end(), {conv3(C, C), lrelu, conv3(C, C), lrelu});
  for (int level = 0; level < depth; ++level) {
    ds.insert(ds.end(), {LayerSpec{LayerKind::UpConv2x2, {C, C, 2, 2}}, LayerSpec{LayerKind::Concat, {}},
                         conv3(C, 2 * C), lrelu});
  }
  ds.push_back({LayerKind::Conv1x1, {1, C, 1, 1}});
  ds.push_back({LayerKind::Output, {0, 0, 0, 0}});

  auto& db = a.deblur.layers;
  db.push_back({LayerKind::Input, {1, 0, 0, 0}});
  db.insert(db.end(), {conv3(C, 1), lrelu});
  for (int block = 1; block < 5; ++block) db.insert(db.end(), {conv3(C, C), lrelu});
  db.push_back(conv3(1, C));
  db.push_back({LayerKind::Output, {1, 0, 0, 0}});
  return a;
}

template <typename T>
BranchParams<T> zero_params(const BranchDescriptor& d) {
  BranchParams<T> p;
  for (const auto& l : d.layers)
    if (l.has_params())
      p.layers.push_back(ConvParams<T>::zeros(static_cast<int>(l.extents[0]), static_cast<int>(l.extents[1]),
                                              static_cast<int>(l.extents[2]), static_cast<int>(l.extents[3])));
  return p;
}

template BranchParams<float> zero_params(const BranchDescriptor&);
template BranchParams<double> zero_params(const BranchDescriptor&);

namespace {

void he_uniform(const BranchDescriptor& d, BranchParams<float>& p, Rng& rng) {
  std::size_t k = 0;
  for (const auto& l : d.layers) {
    if (!l.has_params()) continue;
    auto& layer = p.layers[k++];
    // Taps feeding one output element: in_c * kh * kw for "same" convs, in_c
    // for the non-overlapping stride-2 transposed conv.
    const double fan_in = l.kind == LayerKind::UpConv2x2 ? layer.in_c() : static_cast<double>(layer.in_c()) * layer.kh() * layer.kw();
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& w : layer.weight.storage()) w = static_cast<float>(rng.uniform(-bound, bound));
  }
}

}  // namespace

Model build_default(std::uint64_t seed) {
  Model m;
  m.descriptor = default_descriptor();
  m.descriptor.despeckle.validate();
  m.descriptor.deblur.validate();
  m.despeckle = zero_params<float>(m.descriptor.despeckle);
  m.deblur = zero_params<float>(m.descriptor.deblur);
  Rng rng(seed);
  he_uniform(m.descriptor.despeckle, m.despeckle, rng);
  he_uniform(m.descriptor.deblur, m.deblur, rng);
  if (param_count(m) > kParamBudget)
    throw Error(ErrorCode::BudgetExceeded, std::to_string(param_count(m)) + " parameters exceed the budget");
  return m;
}

std::size_t param_count(const BranchDescriptor& d) {
  std::size_t n = 0;
  for (const auto& l : d.layers)
    if (l.has_params()) n += static_cast<std::size_t>(l.extents[0]) * l.extents[1] * l.extents[2] * l.extents[3] + l.extents[0];
  return n;
}

std::size_t param_count(const Model& m) { return m.despeckle.param_count() + m.deblur.param_count(); }

std::uint64_t flop_count(const BranchDescriptor& d, int h, int w) {
  std::uint64_t flops = 0;
  std::uint64_t H = static_cast<std::uint64_t>(h);
  std::uint64_t W = static_cast<std::uint64_t>(w);
  for (const auto& l : d.layers) {
    switch (l.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
        flops += 2ull * l.extents[0] * l.extents[1] * l.extents[2] * l.extents[3] * H * W;
        break;
      case LayerKind::UpConv2x2:
        H *= 2;
        W *= 2;
        flops += 2ull * l.extents[0] * l.extents[1] * H * W;
        break;
      case LayerKind::MaxPool2:
        H /= 2;
        W /= 2;
        break;
      default: break;
    }
  }
  return flops;
}

std::uint64_t flop_count(const Model& m, int h, int w) {
  return flop_count(m.descriptor.despeckle, h, w) + flop_count(m.descriptor.deblur, h, w);
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void apply_fake_quant(BasicTensor4<T>& t, const quant::ActivationQuant& q, std::vector<std::uint8_t>* mask) {
  if constexpr (std::is_same_v<T, float>) {
    if (mask) mask->resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      bool inside = false;
      t.data()[i] = quant::fake_quant(t.data()[i], q, inside);
      if (mask) (*mask)[i] = inside ? 1 : 0;
    }
  } else {
    throw Error(ErrorCode::InvalidConfig, "fake quantization is only defined for float execution");
  }
}

template <typename T>
ConvParams<T> fake_quant_weights(const ConvParams<T>& p) {
  if constexpr (std::is_same_v<T, float>) {
    ConvParams<float> out = p;
    const auto q = quant::quantize_weights(p.weight.span());
    const auto deq = quant::dequantize(q);
    std::copy(deq.begin(), deq.end(), out.weight.storage().begin());
    return out;
  } else {
    throw Error(ErrorCode::InvalidConfig, "fake quantization is only defined for float execution");
  }
}

}  // namespace

template <typename T>
BasicTensor4<T> run_branch(const BranchDescriptor& d, const BranchParams<T>& p, const BasicTensor4<T>& input,
                           BranchTrace<T>* trace, const FakeQuant* fq, LayerTimes* times) {
  if (p.layers.size() != d.param_layer_count()) throw Error(ErrorCode::DescriptorMismatch, "parameter list does not match descriptor");
  const int multiple = d.spatial_multiple();
  if (input.h() % multiple != 0 || input.w() % multiple != 0)
    throw Error(ErrorCode::NonDivisibleDims, "input " + input.shape().str() + " is not divisible by " + std::to_string(multiple));
  if (fq && !fq->activations.empty() && fq->activations.size() != d.layers.size())
    throw Error(ErrorCode::DescriptorMismatch, "fake-quant table does not match descriptor");
  if (times && times->seconds.size() != d.layers.size()) times->seconds.assign(d.layers.size(), 0.0);

  std::vector<ConvParams<T>> quantized;
  if (fq && fq->weights) {
    quantized.reserve(p.layers.size());
    for (const auto& l : p.layers) quantized.push_back(fake_quant_weights(l));
  }
  const std::vector<ConvParams<T>>& weights = quantized.empty() ? p.layers : quantized;

  if (trace) {
    trace->outputs.assign(d.layers.size(), {});
    trace->argmax.assign(d.layers.size(), {});
    trace->masks.assign(d.layers.size(), {});
    trace->effective = weights;
  }

  BasicTensor4<T> act;
  std::vector<BasicTensor4<T>> skips;
  std::size_t k = 0;
  std::vector<std::uint32_t> argmax;
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& layer = d.layers[i];
    switch (layer.kind) {
      case LayerKind::Input:
        if (input.c() != static_cast<int>(layer.extents[0])) throw Error(ErrorCode::ShapeMismatch, "branch input channel mismatch");
        act = input;
        break;
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: act = nn::conv2d_forward(act, weights[k++]); break;
      case LayerKind::UpConv2x2: act = nn::upconv2x2_forward(act, weights[k++]); break;
      case LayerKind::LeakyReLU: act = nn::leaky_relu_forward(act); break;
      case LayerKind::MaxPool2:
        skips.push_back(act);
        act = nn::maxpool2_forward(act, argmax);
        if (trace) trace->argmax[i] = argmax;
        break;
      case LayerKind::Concat:
        act = nn::concat_forward(skips.back(), act);
        skips.pop_back();
        break;
      case LayerKind::Output:
        if (d.residual()) {
          T* a = act.data();
          const T* x = input.data();
          for (std::size_t j = 0; j < act.size(); ++j) a[j] += x[j];
        }
        break;
    }
    if (fq && !fq->activations.empty() && fq->activations[i])
      apply_fake_quant(act, *fq->activations[i], trace ? &trace->masks[i] : nullptr);
    if (trace) trace->outputs[i] = act;
    if (times) times->seconds[i] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return act;
}

template <typename T>
BranchParams<T> backward_branch(const BranchDescriptor& d, const BranchParams<T>& p, const BranchTrace<T>& trace,
                                const BasicTensor4<T>& grad_output) {
  if (trace.outputs.size() != d.layers.size()) throw Error(ErrorCode::DescriptorMismatch, "trace does not match descriptor");
  BranchParams<T> grads;
  grads.layers.resize(p.layers.size());
  std::size_t k = p.layers.size();
  BasicTensor4<T> grad = grad_output;
  std::vector<BasicTensor4<T>> skip_grads;

  for (std::size_t i = d.layers.size() - 1; i >= 1; --i) {
    if (!trace.masks[i].empty()) {
      T* g = grad.data();
      for (std::size_t j = 0; j < grad.size(); ++j)
        if (!trace.masks[i][j]) g[j] = T{};
    }
    const auto& layer = d.layers[i];
    const auto& below = trace.outputs[i - 1];
    const bool need_input_grad = i - 1 > 0;
    switch (layer.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: {
        --k;
        auto r = nn::conv2d_backward(below, trace.effective[k], grad, need_input_grad);
        grads.layers[k] = std::move(r.grad);
        grad = std::move(r.grad_x);
        break;
      }
      case LayerKind::UpConv2x2: {
        --k;
        auto r = nn::upconv2x2_backward(below, trace.effective[k], grad, need_input_grad);
        grads.layers[k] = std::move(r.grad);
        grad = std::move(r.grad_x);
        break;
      }
      case LayerKind::LeakyReLU: grad = nn::leaky_relu_backward(below, grad); break;
      case LayerKind::MaxPool2: {
        grad = nn::maxpool2_backward(below.shape(), trace.argmax[i], grad);
        const auto& skip = skip_grads.back();
        for (std::size_t j = 0; j < grad.size(); ++j) grad.data()[j] += skip.data()[j];
        skip_grads.pop_back();
        break;
      }
      case LayerKind::Concat: {
        const int skip_channels = trace.outputs[i].c() - below.c();
        BasicTensor4<T> gskip, gcur;
        nn::concat_backward(grad, skip_channels, gskip, gcur);
        skip_grads.push_back(std::move(gskip));
        grad = std::move(gcur);
        break;
      }
      case LayerKind::Output:
      case LayerKind::Input: break;
    }
    if (grad.empty()) break;  // reached the first parametric layer
  }
  return grads;
}

template nn::Tensor4 run_branch(const BranchDescriptor&, const BranchParams<float>&, const nn::Tensor4&,
                                BranchTrace<float>*, const FakeQuant*, LayerTimes*);
template nn::Tensor4d run_branch(const BranchDescriptor&, const BranchParams<double>&, const nn::Tensor4d&,
                                 BranchTrace<double>*, const FakeQuant*, LayerTimes*);
template BranchParams<float> backward_branch(const BranchDescriptor&, const BranchParams<float>&,
                                             const BranchTrace<float>&, const nn::Tensor4&);
template BranchParams<double> backward_branch(const BranchDescriptor&, const BranchParams<double>&,
                                              const BranchTrace<double>&, const nn::Tensor4d&);

// ---------------------------------------------------------------------------

Image pad_to_multiple(const Image& img, int multiple) {
  const int w = (img.width() + multiple - 1) / multiple * multiple;
  const int h = (img.height() + multiple - 1) / multiple * multiple;
  if (w == img.width() && h == img.height()) return img;
  Image out(w, h, img.domain());
  out.set_spacing(img.dx(), img.dz());
  for (int z = 0; z < h; ++z)
    for (int x = 0; x < w; ++x) out.at(x, z) = img.at(reflect_index(x, img.width()), reflect_index(z, img.height()));
  return out;
}

nn::Tensor4 image_to_tensor(const Image& img) {
  nn::Tensor4 t(1, 1, img.height(), img.width());
  const auto src = img.data();
  for (std::size_t i = 0; i < src.size(); ++i) t.data()[i] = src[i] / 255.0f;
  return t;
}

Image tensor_to_display(const nn::Tensor4& t, const Image& like) {
  std::vector<float> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(t.data()[i]), 0.0, 1.0) * 255.0;
    out[i] = static_cast<float>(round_half_away(v));
  }
  Image img(t.w(), t.h(), Domain::Display8, std::move(out));
  img.set_spacing(like.dx(), like.dz());
  return img;
}

Image forward(const Model& m, const Image& img, Branch branch, const ForwardOptions& opt) {
  if (branch == Branch::Fused) {
    const Image despeckled = forward(m, img, Branch::Despeckle, opt);
    return forward(m, despeckled, Branch::Deblur, opt);
  }
  const auto& d = m.descriptor_of(branch);
  const Image padded = opt.pad ? pad_to_multiple(img, d.spatial_multiple()) : img;
  const nn::Tensor4 out = run_branch<float>(d, m.params_of(branch), image_to_tensor(padded), nullptr, nullptr, opt.times);
  Image result = tensor_to_display(out, img);
  if (result.width() != img.width() || result.height() != img.height())
    result = result.crop(0, 0, img.width(), img.height());
  return result;
}

}  // namespace esrie::net
