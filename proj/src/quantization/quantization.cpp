#include "esrie/quantization.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

#include "esrie/error.hpp"
#include "esrie/parallel.hpp"

namespace esrie::quant {

using net::Branch;
using net::BranchDescriptor;
using net::LayerKind;

// ---------------------------------------------------------------------------
// Fixed-point multipliers

std::int64_t rounding_shift(int128 v, int n) {
  if (n <= 0) return static_cast<std::int64_t>(v << -n);
  const int128 half = static_cast<int128>(1) << (n - 1);
  if (v >= 0) return static_cast<std::int64_t>((v + half) >> n);
  return -static_cast<std::int64_t>((-v + half) >> n);
}

FixedMultiplier FixedMultiplier::from_real(double M) {
  if (!(M > 0.0) || !std::isfinite(M)) throw Error(ErrorCode::MissingQuantParams, "requantization scale must be positive");
  int e = 0;
  const double mant = std::frexp(M, &e);  // M = mant * 2^e, mant in [0.5, 1)
  std::int64_t m = std::llround(std::ldexp(mant, 31));
  if (m == (std::int64_t{1} << 31)) {
    m >>= 1;
    ++e;
  }
  return {m, 31 - e};
}

double FixedMultiplier::real() const { return std::ldexp(static_cast<double>(m), -shift); }

std::int64_t FixedMultiplier::apply(std::int64_t acc) const {
  // 32-bit accumulators times a 31-bit multiplier fit in 63 bits.
  if (shift >= 1 && shift <= 62 && acc >= INT32_MIN && acc <= INT32_MAX) {
    const std::int64_t v = acc * m;
    const std::int64_t half = std::int64_t{1} << (shift - 1);
    return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
  }
  return rounding_shift(static_cast<int128>(acc) * m, shift);
}

// ---------------------------------------------------------------------------
// Calibration

void CalibrationStats::merge(const CalibrationStats& other) {
  auto join = [](BranchStats& a, const BranchStats& b) {
    if (b.min.empty()) return;
    if (a.min.empty()) {
      a = b;
      return;
    }
    if (a.min.size() != b.min.size()) throw Error(ErrorCode::DescriptorMismatch, "calibration stats from different models");
    for (std::size_t i = 0; i < a.min.size(); ++i) {
      a.min[i] = std::min(a.min[i], b.min[i]);
      a.max[i] = std::max(a.max[i], b.max[i]);
    }
  };
  join(despeckle, other.despeckle);
  join(deblur, other.deblur);
  samples += other.samples;
}

namespace {

BranchStats observe(const BranchDescriptor& d, const net::BranchParams<float>& p, const Image& img) {
  const Image padded = net::pad_to_multiple(img, d.spatial_multiple());
  net::BranchTrace<float> trace;
  net::run_branch(d, p, net::image_to_tensor(padded), &trace);
  BranchStats s;
  for (const auto& t : trace.outputs) {
    const auto [lo, hi] = std::minmax_element(t.storage().begin(), t.storage().end());
    s.min.push_back(*lo);
    s.max.push_back(*hi);
  }
  return s;
}

}  // namespace

CalibrationStats calibrate(const net::Model& model, std::span<const Image> images, int threads) {
  if (images.empty()) throw Error(ErrorCode::EmptyCalibrationSet, "calibration needs at least one image");
  std::vector<CalibrationStats> per_image(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const Image& img = images[i];
    auto& s = per_image[i];
    s.despeckle = observe(model.descriptor.despeckle, model.despeckle, img);
    const Image deblur_input = model.fused ? net::forward(model, img, Branch::Despeckle) : img;
    s.deblur = observe(model.descriptor.deblur, model.deblur, deblur_input);
    s.samples = 1;
  });
  CalibrationStats total;
  for (const auto& s : per_image) total.merge(s);
  return total;
}

std::vector<int> activation_owners(const BranchDescriptor& d) {
  const int L = static_cast<int>(d.layers.size());
  std::vector<int> owner(static_cast<std::size_t>(L), -1);
  std::vector<int> parent(static_cast<std::size_t>(L));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) a = parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
    return a;
  };
  std::vector<int> skips;
  for (int i = 0; i < L; ++i) {
    const auto kind = d.layers[static_cast<std::size_t>(i)].kind;
    auto& o = owner[static_cast<std::size_t>(i)];
    switch (kind) {
      case LayerKind::Input:
      case LayerKind::Output: o = -1; break;
      case LayerKind::LeakyReLU:
      case LayerKind::UpConv2x2: o = i; break;
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1: {
        const auto next = d.layers[static_cast<std::size_t>(i + 1)].kind;
        if (next == LayerKind::LeakyReLU) o = i + 1;
        else if (next == LayerKind::Output) o = -1;
        else throw Error(ErrorCode::DescriptorMismatch, "integer path needs every conv followed by LeakyReLU or Output");
        break;
      }
      case LayerKind::MaxPool2:
        o = owner[static_cast<std::size_t>(i - 1)];
        skips.push_back(o);
        break;
      case LayerKind::Concat: {
        const int skip = skips.back();
        skips.pop_back();
        const int cur = owner[static_cast<std::size_t>(i - 1)];
        if (skip < 0 || cur < 0) throw Error(ErrorCode::DescriptorMismatch, "concat operands must be calibrated tensors");
        parent[static_cast<std::size_t>(find(skip))] = find(cur);
        o = cur;
        break;
      }
    }
    if (kind == LayerKind::LeakyReLU && d.layers[static_cast<std::size_t>(i - 1)].kind != LayerKind::Conv3x3 &&
        d.layers[static_cast<std::size_t>(i - 1)].kind != LayerKind::Conv1x1)
      throw Error(ErrorCode::DescriptorMismatch, "integer path fuses LeakyReLU into the preceding conv");
  }
  for (auto& o : owner)
    if (o >= 0) o = find(o);
  return owner;
}

namespace {

std::vector<ActivationQuant> branch_params(const BranchDescriptor& d, const BranchStats& s) {
  if (s.min.size() != d.layers.size()) throw Error(ErrorCode::DescriptorMismatch, "calibration stats do not match the model");
  const auto owner = activation_owners(d);
  const auto L = d.layers.size();
  std::vector<float> lo(L, std::numeric_limits<float>::infinity());
  std::vector<float> hi(L, -std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < L; ++i) {
    const auto kind = d.layers[i].kind;
    if (kind != LayerKind::LeakyReLU && kind != LayerKind::UpConv2x2) continue;
    const auto root = static_cast<std::size_t>(owner[i]);
    lo[root] = std::min(lo[root], s.min[i]);
    hi[root] = std::max(hi[root], s.max[i]);
  }
  std::vector<ActivationQuant> out(L, kDisplayQuant);
  for (std::size_t i = 0; i < L; ++i) {
    if (owner[i] < 0) continue;
    const auto root = static_cast<std::size_t>(owner[i]);
    out[i] = choose_activation_quant(lo[root], hi[root]);
  }
  return out;
}

}  // namespace

QuantParams choose_quant_params(const net::Model& model, const CalibrationStats& stats) {
  if (stats.samples == 0) throw Error(ErrorCode::EmptyCalibrationSet, "no calibration samples observed");
  return {branch_params(model.descriptor.despeckle, stats.despeckle), branch_params(model.descriptor.deblur, stats.deblur)};
}

net::FakeQuant make_fake_quant(const BranchDescriptor& d, const std::vector<ActivationQuant>& params) {
  if (params.size() != d.layers.size()) throw Error(ErrorCode::MissingQuantParams, "activation parameters do not match the branch");
  net::FakeQuant fq;
  fq.weights = true;
  fq.activations.resize(d.layers.size());
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const auto kind = d.layers[i].kind;
    if (kind == LayerKind::LeakyReLU || kind == LayerKind::UpConv2x2 || kind == LayerKind::Output) fq.activations[i] = params[i];
  }
  return fq;
}

net::Model quantize_model(const net::Model& model, const QuantParams& params) {
  if (params.despeckle.size() != model.descriptor.despeckle.layers.size() ||
      params.deblur.size() != model.descriptor.deblur.layers.size())
    throw Error(ErrorCode::MissingQuantParams, "activation parameters do not match the model");
  net::Model q = model;
  q.precision = net::Precision::Int8Quantized;
  auto convert = [](net::BranchParams<float>& p, const std::vector<ActivationQuant>& acts) {
    net::BranchQuant bq;
    for (auto& l : p.layers) {
      bq.weights.push_back(quantize_weights(l.weight.span()));
      const auto deq = dequantize(bq.weights.back());
      std::copy(deq.begin(), deq.end(), l.weight.storage().begin());
    }
    bq.activations = acts;
    return bq;
  };
  q.despeckle_quant = convert(q.despeckle, params.despeckle);
  q.deblur_quant = convert(q.deblur, params.deblur);
  return q;
}

// ---------------------------------------------------------------------------
// Integer runtime

struct IntegerBranch::Op {
  enum class Kind { Conv, UpConv, MaxPool, Concat };
  Kind kind = Kind::Conv;
  std::size_t first_layer = 0;
  int out_c = 0;
  int in_c = 0;
  int k = 0;
  std::vector<std::int32_t> w;       // (out, in, k, k)
  std::vector<std::int32_t> wpairs;  // per output channel, taps packed two per int32 (low half first)
  // Channel quads (four int8 per int32) as [o][c/4][ky][kx], outputs padded to
  // a multiple of 8; bias_quad folds in -z_in * sum(w).
  std::vector<std::int32_t> wquads;
  std::vector<std::int32_t> bias_quad;
  std::vector<std::int32_t> bias;
  std::int32_t z_in = 0;
  std::int32_t z_out = 0;
  FixedMultiplier pos;
  FixedMultiplier neg;
  bool lrelu = false;
  bool residual = false;
  FixedMultiplier res;
  std::int32_t z_res = 0;
  // Real targets kept only for reporting.
  double pos_real = 0.0;
  double neg_real = 0.0;
  double res_real = 0.0;
};

IntegerBranch::IntegerBranch() = default;
IntegerBranch::IntegerBranch(const IntegerBranch&) = default;
IntegerBranch::IntegerBranch(IntegerBranch&&) noexcept = default;
IntegerBranch& IntegerBranch::operator=(const IntegerBranch&) = default;
IntegerBranch& IntegerBranch::operator=(IntegerBranch&&) noexcept = default;
IntegerBranch::~IntegerBranch() = default;

namespace {

struct U8Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
};

inline std::uint8_t saturate(std::int64_t v) { return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255)); }

std::int64_t residual_sum(const IntegerBranch::Op& op, std::int64_t acc, std::int32_t x) {
  using i128 = int128;
  const int S = std::max(op.pos.shift, op.res.shift);
  const i128 a = (static_cast<i128>(acc) * op.pos.m) << (S - op.pos.shift);
  const i128 b = (static_cast<i128>(x - op.z_res) * op.res.m) << (S - op.res.shift);
  return rounding_shift(a + b, S);
}

// Taps of one output row as interleaved int16 pairs: pair p holds taps 2p and
// 2p+1 of the (c, ky, kx) order side by side for every column, so that one
// 16-bit multiply-add per pair accumulates both taps into an int32 lane.
// Padding columns and the spare odd tap stay zero.
void gather_tap_pairs(const std::vector<std::int16_t>& centered, int in_c, int k, int H, int W, int y, int Wp,
                      std::vector<std::int16_t>& buf) {
  const int pad = k / 2;
  int t = 0;
  for (int c = 0; c < in_c; ++c) {
    const std::int16_t* ip = centered.data() + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < k; ++ky) {
      const int iy = y + ky - pad;
      for (int kx = 0; kx < k; ++kx, ++t) {
        std::int16_t* dst = buf.data() + static_cast<std::size_t>(t / 2) * 2 * Wp + (t % 2);
        const int dx = kx - pad;
        if (iy < 0 || iy >= H) {
          for (int xx = 0; xx < W; ++xx) dst[2 * xx] = 0;
          continue;
        }
        const std::int16_t* irow = ip + static_cast<std::size_t>(iy) * W;
        for (int xx = 0; xx < W; ++xx) {
          const int sx = xx + dx;
          dst[2 * xx] = sx >= 0 && sx < W ? irow[sx] : std::int16_t{0};
        }
      }
    }
  }
}

// acc[x] += lo(w) * buf[2x] + hi(w) * buf[2x + 1] for every column.
void madd_pairs(const std::int16_t* buf, std::int32_t wpair, std::int32_t* acc, int Wp) {
#if defined(__AVX2__)
  const __m256i wv = _mm256_set1_epi32(wpair);
  for (int xx = 0; xx < Wp; xx += 8) {
    const __m256i in = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(buf + 2 * xx));
    __m256i a = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(acc + xx));
    a = _mm256_add_epi32(a, _mm256_madd_epi16(in, wv));
    _mm256_storeu_si256(reinterpret_cast<__m256i*>(acc + xx), a);
  }
#else
  const auto w0 = static_cast<std::int16_t>(wpair & 0xffff);
  const auto w1 = static_cast<std::int16_t>(static_cast<std::uint32_t>(wpair) >> 16);
  for (int xx = 0; xx < Wp; ++xx) acc[xx] += w0 * buf[2 * xx] + w1 * buf[2 * xx + 1];
#endif
}

std::atomic<bool> g_portable_kernels{false};

// Accumulator rows (out_c x Wp int32) of every output row, handed to emit(y, acc, Wp).
template <typename Emit>
void conv_rows_pairs(const IntegerBranch::Op& op, const U8Tensor& x, Emit&& emit) {
  const int H = x.h;
  const int W = x.w;
  const int Wp = (W + 7) / 8 * 8;
  const int pairs = static_cast<int>(op.wpairs.size()) / op.out_c;
  std::vector<std::int16_t> centered(x.v.size());
  for (std::size_t i = 0; i < x.v.size(); ++i) centered[i] = static_cast<std::int16_t>(x.v[i] - op.z_in);
  std::vector<std::int16_t> buf(static_cast<std::size_t>(pairs) * 2 * Wp, 0);
  std::vector<std::int32_t> acc(static_cast<std::size_t>(op.out_c) * Wp);
  for (int y = 0; y < H; ++y) {
    gather_tap_pairs(centered, op.in_c, op.k, H, W, y, Wp, buf);
    for (int o = 0; o < op.out_c; ++o)
      std::fill_n(acc.begin() + static_cast<std::ptrdiff_t>(o) * Wp, Wp, op.bias[static_cast<std::size_t>(o)]);
    for (int pr = 0; pr < pairs; ++pr) {
      const std::int16_t* b = buf.data() + static_cast<std::size_t>(pr) * 2 * Wp;
      for (int o = 0; o < op.out_c; ++o)
        madd_pairs(b, op.wpairs[static_cast<std::size_t>(o) * pairs + pr], acc.data() + static_cast<std::size_t>(o) * Wp, Wp);
    }
    emit(y, acc.data(), Wp);
  }
}

#if defined(__AVX512VNNI__) && defined(__AVX512BW__)
constexpr bool kHaveVnni = true;

// Input as channel quads: plane g holds channels 4g..4g+3 of each pixel in one
// uint32, bordered by the zero point so that border taps contribute
// z_in * w like every other tap. Eight output channels accumulate at once
// over 16 columns with u8 x s8 dot products of four taps.
template <typename Emit>
void conv_rows_vnni(const IntegerBranch::Op& op, const U8Tensor& x, Emit&& emit) {
  const int H = x.h;
  const int W = x.w;
  const int k = op.k;
  const int pad = k / 2;
  const int Wb = (W + 15) / 16 * 16;
  const int pitch = Wb + 2 * pad;
  const int rows = H + 2 * pad;
  const int G = (op.in_c + 3) / 4;
  const int outs = static_cast<int>(op.bias_quad.size());
  const int taps = G * k * k;
  const auto zq = static_cast<std::uint32_t>(op.z_in) * 0x01010101u;
  std::vector<std::uint32_t> planes(static_cast<std::size_t>(G) * rows * pitch, zq);
  auto* bytes = reinterpret_cast<std::uint8_t*>(planes.data());
  for (int c = 0; c < op.in_c; ++c) {
    const std::uint8_t* src = x.v.data() + static_cast<std::size_t>(c) * x.plane();
    for (int y = 0; y < H; ++y) {
      std::uint8_t* dst = bytes + ((static_cast<std::size_t>(c / 4) * rows + y + pad) * pitch + pad) * 4 + c % 4;
      for (int xx = 0; xx < W; ++xx) dst[4 * xx] = src[static_cast<std::size_t>(y) * W + xx];
    }
  }
  std::vector<std::int32_t> acc(static_cast<std::size_t>(outs) * Wb);
  for (int y = 0; y < H; ++y) {
    for (int ob = 0; ob < outs; ob += 8) {
      const std::int32_t* wq = op.wquads.data() + static_cast<std::size_t>(ob) * taps;
      for (int xb = 0; xb < Wb; xb += 16) {
        __m512i a[8];
        for (int j = 0; j < 8; ++j) a[j] = _mm512_set1_epi32(op.bias_quad[static_cast<std::size_t>(ob + j)]);
        int t = 0;
        for (int g = 0; g < G; ++g)
          for (int ky = 0; ky < k; ++ky) {
            const std::uint32_t* row = planes.data() + (static_cast<std::size_t>(g) * rows + y + ky) * pitch + xb;
            for (int kx = 0; kx < k; ++kx, ++t) {
              const __m512i v = _mm512_loadu_si512(row + kx);
              for (int j = 0; j < 8; ++j)
                a[j] = _mm512_dpbusd_epi32(a[j], v, _mm512_set1_epi32(wq[static_cast<std::size_t>(j) * taps + t]));
            }
          }
        for (int j = 0; j < 8; ++j) _mm512_storeu_si512(acc.data() + static_cast<std::size_t>(ob + j) * Wb + xb, a[j]);
      }
    }
    emit(y, acc.data(), Wb);
  }
}
#else
constexpr bool kHaveVnni = false;
#endif

U8Tensor run_conv(const IntegerBranch::Op& op, const U8Tensor& x, const U8Tensor* residual_input) {
  const int H = x.h;
  const int W = x.w;
  U8Tensor out{op.out_c, H, W, std::vector<std::uint8_t>(static_cast<std::size_t>(op.out_c) * H * W)};
  auto emit = [&](int y, const std::int32_t* acc, int pitch) {
    for (int o = 0; o < op.out_c; ++o) {
      const std::int32_t* a = acc + static_cast<std::size_t>(o) * pitch;
      std::uint8_t* orow = out.v.data() + (static_cast<std::size_t>(o) * H + y) * W;
      if (op.residual) {
        const std::uint8_t* rrow = residual_input->v.data() + static_cast<std::size_t>(y) * W;
        for (int xx = 0; xx < W; ++xx) orow[xx] = saturate(op.z_out + residual_sum(op, a[xx], rrow[xx]));
      } else if (op.lrelu) {
        for (int xx = 0; xx < W; ++xx) orow[xx] = saturate(op.z_out + (a[xx] < 0 ? op.neg.apply(a[xx]) : op.pos.apply(a[xx])));
      } else {
        for (int xx = 0; xx < W; ++xx) orow[xx] = saturate(op.z_out + op.pos.apply(a[xx]));
      }
    }
  };
#if defined(__AVX512VNNI__) && defined(__AVX512BW__)
  if (!g_portable_kernels.load(std::memory_order_relaxed)) {
    conv_rows_vnni(op, x, emit);
    return out;
  }
#endif
  conv_rows_pairs(op, x, emit);
  return out;
}

void prepare_quads(IntegerBranch::Op& op) {
  const int G = (op.in_c + 3) / 4;
  const int kk = op.k * op.k;
  const int outs = (op.out_c + 7) / 8 * 8;
  op.wquads.assign(static_cast<std::size_t>(outs) * G * kk, 0);
  op.bias_quad.assign(static_cast<std::size_t>(outs), 0);
  for (int o = 0; o < op.out_c; ++o) {
    std::int64_t sum = 0;
    for (int c = 0; c < op.in_c; ++c)
      for (int t = 0; t < kk; ++t) {
        const std::int32_t w = op.w[(static_cast<std::size_t>(o) * op.in_c + c) * kk + t];
        sum += w;
        auto& slot = op.wquads[(static_cast<std::size_t>(o) * G + c / 4) * kk + t];
        const auto bits = static_cast<std::uint32_t>(static_cast<std::uint8_t>(static_cast<std::int8_t>(w)));
        slot = static_cast<std::int32_t>(static_cast<std::uint32_t>(slot) | (bits << (8 * (c % 4))));
      }
    op.bias_quad[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(op.bias[static_cast<std::size_t>(o)] - sum * op.z_in);
  }
}

U8Tensor run_upconv(const IntegerBranch::Op& op, const U8Tensor& x) {
  const int H = x.h;
  const int W = x.w;
  const int W2 = 2 * W;
  std::vector<std::int32_t> centered(x.v.size());
  for (std::size_t i = 0; i < x.v.size(); ++i) centered[i] = static_cast<std::int32_t>(x.v[i]) - op.z_in;
  U8Tensor out{op.out_c, 2 * H, W2, std::vector<std::uint8_t>(static_cast<std::size_t>(op.out_c) * 4 * H * W)};
  std::vector<std::int32_t> acc(static_cast<std::size_t>(4) * H * W);
  for (int o = 0; o < op.out_c; ++o) {
    std::fill(acc.begin(), acc.end(), op.bias[static_cast<std::size_t>(o)]);
    for (int c = 0; c < op.in_c; ++c) {
      const std::int32_t* ip = centered.data() + static_cast<std::size_t>(c) * x.plane();
      const std::int32_t* wk = op.w.data() + (static_cast<std::size_t>(o) * op.in_c + c) * 4;
      for (int i = 0; i < H; ++i) {
        std::int32_t* row0 = acc.data() + static_cast<std::size_t>(2 * i) * W2;
        std::int32_t* row1 = row0 + W2;
        const std::int32_t* irow = ip + static_cast<std::size_t>(i) * W;
        for (int j = 0; j < W; ++j) {
          const std::int32_t v = irow[j];
          row0[2 * j] += v * wk[0];
          row0[2 * j + 1] += v * wk[1];
          row1[2 * j] += v * wk[2];
          row1[2 * j + 1] += v * wk[3];
        }
      }
    }
    std::uint8_t* op_out = out.v.data() + static_cast<std::size_t>(o) * out.plane();
    for (std::size_t i = 0; i < acc.size(); ++i) op_out[i] = saturate(op.z_out + op.pos.apply(acc[i]));
  }
  return out;
}

U8Tensor run_maxpool(const U8Tensor& x) {
  const int Ho = x.h / 2;
  const int Wo = x.w / 2;
  U8Tensor out{x.c, Ho, Wo, std::vector<std::uint8_t>(static_cast<std::size_t>(x.c) * Ho * Wo)};
  for (int c = 0; c < x.c; ++c) {
    const std::uint8_t* ip = x.v.data() + static_cast<std::size_t>(c) * x.plane();
    std::uint8_t* opp = out.v.data() + static_cast<std::size_t>(c) * out.plane();
    for (int i = 0; i < Ho; ++i) {
      const std::uint8_t* r0 = ip + static_cast<std::size_t>(2 * i) * x.w;
      const std::uint8_t* r1 = r0 + x.w;
      for (int j = 0; j < Wo; ++j)
        opp[static_cast<std::size_t>(i) * Wo + j] = std::max({r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]});
    }
  }
  return out;
}

U8Tensor run_concat(const U8Tensor& a, const U8Tensor& b) {
  if (a.h != b.h || a.w != b.w) throw Error(ErrorCode::ShapeMismatch, "concat operands differ in spatial size");
  U8Tensor out{a.c + b.c, a.h, a.w, a.v};
  out.v.insert(out.v.end(), b.v.begin(), b.v.end());
  return out;
}

}  // namespace

void use_portable_integer_kernels(bool on) { g_portable_kernels.store(on, std::memory_order_relaxed); }

bool wide_integer_kernels_available() { return kHaveVnni; }

IntegerBranch IntegerBranch::compile(const net::Model& model, Branch branch) {
  if (branch == Branch::Fused) throw Error(ErrorCode::InvalidConfig, "compile one branch at a time");
  const auto& q = model.quant_of(branch);
  const auto& d = model.descriptor_of(branch);
  const auto& p = model.params_of(branch);
  if (model.precision != net::Precision::Int8Quantized || !q || q->activations.size() != d.layers.size() ||
      q->weights.size() != p.layers.size())
    throw Error(ErrorCode::MissingQuantParams, "integer inference needs an int8 model with activation parameters");
  activation_owners(d);  // rejects layer sequences the integer path cannot fuse
  if (!(q->activations.front() == kDisplayQuant) || !(q->activations.back() == kDisplayQuant))
    throw Error(ErrorCode::MissingQuantParams, "branch input and output must use display quantization");

  IntegerBranch b;
  b.multiple_ = d.spatial_multiple();
  const auto& acts = q->activations;
  std::size_t k = 0;
  for (std::size_t i = 1; i < d.layers.size(); ++i) {
    const auto& layer = d.layers[i];
    Op op;
    op.first_layer = i;
    switch (layer.kind) {
      case LayerKind::Conv3x3:
      case LayerKind::Conv1x1:
      case LayerKind::UpConv2x2: {
        const auto& qw = q->weights[k];
        const auto& bias = p.layers[k].bias;
        ++k;
        op.kind = layer.kind == LayerKind::UpConv2x2 ? Op::Kind::UpConv : Op::Kind::Conv;
        op.out_c = static_cast<int>(layer.extents[0]);
        op.in_c = static_cast<int>(layer.extents[1]);
        op.k = static_cast<int>(layer.extents[2]);
        op.w.assign(qw.q.begin(), qw.q.end());
        if (op.kind == Op::Kind::Conv) {
          const int taps = op.in_c * op.k * op.k;
          const int pairs = (taps + 1) / 2;
          op.wpairs.assign(static_cast<std::size_t>(op.out_c) * pairs, 0);
          for (int o = 0; o < op.out_c; ++o)
            for (int t = 0; t < taps; ++t) {
              const auto bits = static_cast<std::uint16_t>(static_cast<std::int16_t>(op.w[static_cast<std::size_t>(o) * taps + t]));
              auto& slot = op.wpairs[static_cast<std::size_t>(o) * pairs + t / 2];
              slot = static_cast<std::int32_t>(static_cast<std::uint32_t>(slot) | (static_cast<std::uint32_t>(bits) << (16 * (t % 2))));
            }
        }
        const ActivationQuant in = acts[i - 1];
        const double acc_scale = static_cast<double>(in.scale) * qw.scale;
        for (float bv : bias) {
          const double r = std::round(static_cast<double>(bv) / acc_scale);
          if (std::abs(r) > 2.0e9) throw Error(ErrorCode::NonFiniteWeights, "bias does not fit the int32 accumulator");
          op.bias.push_back(static_cast<std::int32_t>(r));
        }
        op.z_in = in.zero_point;
        std::size_t out_index = i;
        if (layer.kind != LayerKind::UpConv2x2) {
          out_index = i + 1;
          const auto next = d.layers[i + 1].kind;
          op.lrelu = next == LayerKind::LeakyReLU;
          op.residual = next == LayerKind::Output && d.residual();
        }
        const ActivationQuant out = acts[out_index];
        op.z_out = out.zero_point;
        op.pos_real = acc_scale / out.scale;
        op.pos = FixedMultiplier::from_real(op.pos_real);
        if (op.lrelu) {
          op.neg_real = nn::kLeakySlope * op.pos_real;
          op.neg = FixedMultiplier::from_real(op.neg_real);
        }
        if (op.residual) {
          op.z_res = acts.front().zero_point;
          op.res_real = static_cast<double>(acts.front().scale) / out.scale;
          op.res = FixedMultiplier::from_real(op.res_real);
        }
        if (out_index != i) ++i;  // the activation or output layer is fused
        break;
      }
      case LayerKind::MaxPool2: op.kind = Op::Kind::MaxPool; break;
      case LayerKind::Concat:
        op.kind = Op::Kind::Concat;
        break;
      case LayerKind::Output: continue;
      case LayerKind::LeakyReLU:
      case LayerKind::Input: throw Error(ErrorCode::DescriptorMismatch, "unfused layer in integer plan");
    }
    if (op.kind == Op::Kind::Conv) prepare_quads(op);
    b.ops_.push_back(std::move(op));
  }
  return b;
}

std::vector<std::pair<double, double>> IntegerBranch::multipliers() const {
  std::vector<std::pair<double, double>> out;
  for (const auto& op : ops_) {
    if (op.kind != Op::Kind::Conv && op.kind != Op::Kind::UpConv) continue;
    out.emplace_back(op.pos.real(), op.pos_real);
    if (op.lrelu) out.emplace_back(op.neg.real(), op.neg_real);
    if (op.residual) out.emplace_back(op.res.real(), op.res_real);
  }
  return out;
}

std::vector<std::uint8_t> IntegerBranch::run(std::span<const std::uint8_t> input, int height, int width,
                                             net::LayerTimes* times) const {
  if (height % multiple_ != 0 || width % multiple_ != 0)
    throw Error(ErrorCode::NonDivisibleDims, "input is not divisible by " + std::to_string(multiple_));
  if (input.size() != static_cast<std::size_t>(height) * width) throw Error(ErrorCode::ShapeMismatch, "input plane size mismatch");
  const U8Tensor in{1, height, width, std::vector<std::uint8_t>(input.begin(), input.end())};
  U8Tensor act = in;
  std::vector<U8Tensor> skips;
  for (const auto& op : ops_) {
    const auto t0 = std::chrono::steady_clock::now();
    switch (op.kind) {
      case Op::Kind::Conv: act = run_conv(op, act, op.residual ? &in : nullptr); break;
      case Op::Kind::UpConv: act = run_upconv(op, act); break;
      case Op::Kind::MaxPool:
        skips.push_back(act);
        act = run_maxpool(act);
        break;
      case Op::Kind::Concat:
        act = run_concat(skips.back(), act);
        skips.pop_back();
        break;
    }
    if (times) {
      if (times->seconds.size() <= op.first_layer) times->seconds.resize(op.first_layer + 1, 0.0);
      times->seconds[op.first_layer] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }
  return std::move(act.v);
}

IntegerProgram IntegerProgram::compile(const net::Model& model) {
  return {IntegerBranch::compile(model, Branch::Despeckle), IntegerBranch::compile(model, Branch::Deblur)};
}

Image IntegerProgram::run(const Image& img, Branch branch, net::LayerTimes* times) const {
  if (branch == Branch::Fused) return run(run(img, Branch::Despeckle, times), Branch::Deblur, times);
  const IntegerBranch& b = branch == Branch::Deblur ? deblur : despeckle;
  const Image padded = net::pad_to_multiple(img, b.spatial_multiple());
  const auto src = padded.data();
  std::vector<std::uint8_t> bytes(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) bytes[i] = static_cast<std::uint8_t>(std::clamp(std::lround(src[i]), 0L, 255L));
  const auto out = b.run(bytes, padded.height(), padded.width(), times);
  std::vector<float> values(out.begin(), out.end());
  Image result(padded.width(), padded.height(), Domain::Display8, std::move(values));
  result.set_spacing(img.dx(), img.dz());
  if (result.width() != img.width() || result.height() != img.height()) result = result.crop(0, 0, img.width(), img.height());
  return result;
}

Image quantized_forward(const net::Model& model, const Image& img, Branch branch) {
  if (branch == Branch::Fused) {
    const auto program = IntegerProgram::compile(model);
    return program.run(img, branch);
  }
  const IntegerBranch b = IntegerBranch::compile(model, branch);
  IntegerProgram program;
  (branch == Branch::Deblur ? program.deblur : program.despeckle) = b;
  return program.run(img, branch);
}

// ---------------------------------------------------------------------------
// Quantization-aware fine-tuning

double integer_path_loss(const net::Model& int8_model, Branch branch, std::span<const training::ImagePair> pairs) {
  if (pairs.empty()) return 0.0;
  const IntegerBranch b = IntegerBranch::compile(int8_model, branch);
  IntegerProgram program;
  (branch == Branch::Deblur ? program.deblur : program.despeckle) = b;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& pair : pairs) {
    const Image out = program.run(pair.input, branch);
    const auto o = out.data();
    const auto t = pair.target.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double diff = (static_cast<double>(o[i]) - t[i]) / 255.0;
      sum += diff * diff;
    }
    count += o.size();
  }
  return sum / static_cast<double>(count);
}

namespace {

std::vector<training::ImagePair> validation_pairs(const training::Corpus& corpus, Branch branch, const QatConfig& cfg) {
  std::vector<training::ImagePair> pairs;
  const std::uint64_t stream = branch == Branch::Deblur ? 0x0deb1u : 0x0de5eu;
  for (int i = 0; i < cfg.validation_pairs; ++i) {
    Rng rng(derive_seed(cfg.train.seed ^ stream, static_cast<std::uint64_t>(i)));
    if (branch == Branch::Despeckle) {
      const auto& src = corpus.despeckle[rng.below(corpus.despeckle.size())];
      pairs.push_back(training::make_despeckle_pair(src.echo, src.sim, cfg.train.realizations_k, cfg.train.patch_size, rng));
    } else {
      const auto& src = corpus.deblur[rng.below(corpus.deblur.size())];
      pairs.push_back(training::make_deblur_pair(src.image, src.blur, cfg.train.patch_size, rng));
    }
  }
  return pairs;
}

struct BranchQat {
  net::Model model;
  double before = 0.0;
  double after = 0.0;
};

BranchQat finetune_branch(const net::Model& start, Branch branch, const QuantParams& params,
                          const training::Corpus& corpus, const QatConfig& cfg) {
  const bool has_sources = branch == Branch::Despeckle ? !corpus.despeckle.empty() : !corpus.deblur.empty();
  if (!has_sources) throw Error(ErrorCode::EmptyCorpus, "no sources for quantization-aware fine-tuning");
  const auto pairs = validation_pairs(corpus, branch, cfg);
  auto score = [&](const net::Model& m) { return integer_path_loss(quantize_model(m, params), branch, pairs); };

  BranchQat r{start, score(start), 0.0};
  r.after = r.before;
  if (cfg.steps == 0) return r;

  const net::FakeQuant fq = make_fake_quant(start.descriptor_of(branch), params.of(branch));
  training::TrainConfig tc = cfg.train;
  tc.epochs = static_cast<int>(std::min<std::size_t>(cfg.steps, 1u << 30));  // at least one step per epoch
  tc.max_steps = cfg.steps;
  tc.checkpoint_every = 0;
  tc.seed = derive_seed(cfg.train.seed, 0x9a7u);
  const std::size_t every = std::max<std::size_t>(cfg.eval_every, 1);
  training::TrainHooks hooks;
  hooks.fake_quant = &fq;
  hooks.on_step = [&](const training::StepInfo& s, const net::Model& current) {
    if ((s.step + 1) % every != 0 && s.step + 1 != cfg.steps) return;
    const double loss = score(current);
    if (loss < r.after) {
      r.after = loss;
      r.model.params_of(branch) = current.params_of(branch);
    }
  };
  if (branch == Branch::Despeckle) training::train_despeckle(start, corpus, tc, hooks);
  else training::train_deblur(start, corpus, tc, hooks);
  return r;
}

}  // namespace

QatResult qat_finetune(const net::Model& model, const QuantParams& params, const training::Corpus& corpus,
                       const QatConfig& cfg) {
  if (model.precision != net::Precision::Float32) throw Error(ErrorCode::InvalidConfig, "fine-tuning needs the float model");
  const BranchQat ds = finetune_branch(model, Branch::Despeckle, params, corpus, cfg);
  const BranchQat db = finetune_branch(ds.model, Branch::Deblur, params, corpus, cfg);
  return {db.model, ds.before, ds.after, db.before, db.after};
}

}  // namespace esrie::quant
