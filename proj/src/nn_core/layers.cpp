#include "esrie/nn/layers.hpp"

#include <algorithm>

namespace esrie::nn {
namespace {

struct TapRange {
  int lo;
  int hi;  // exclusive
};

// Output indices whose input index (out + offset) falls inside [0, n).
inline TapRange valid_range(int n, int offset) { return {std::max(0, -offset), std::min(n, n - offset)}; }

}  // namespace

template <typename T>
BasicTensor4<T> conv2d_forward(const BasicTensor4<T>& x, const ConvParams<T>& p) {
  require_shape(x.c() == p.in_c(), "conv input has " + std::to_string(x.c()) + " channels, layer expects " +
                                       std::to_string(p.in_c()));
  require_shape(p.kh() == p.kw() && p.kh() % 2 == 1, "conv kernel must be square and odd");
  const int pad = p.kh() / 2;
  const int H = x.h();
  const int W = x.w();
  BasicTensor4<T> out(x.n(), p.out_c(), H, W);
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < p.out_c(); ++o) {
      T* op = out.plane(n, o);
      std::fill(op, op + out.shape().plane(), p.bias[o]);
      for (int y = 0; y < H; ++y) {
        T* orow = op + static_cast<std::size_t>(y) * W;
        for (int c = 0; c < p.in_c(); ++c) {
          const T* ip = x.plane(n, c);
          const T* wk = p.weight.plane(o, c);
          for (int ky = 0; ky < p.kh(); ++ky) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* irow = ip + static_cast<std::size_t>(iy) * W;
            for (int kx = 0; kx < p.kw(); ++kx) {
              const int dx = kx - pad;
              const T wv = wk[ky * p.kw() + kx];
              const auto r = valid_range(W, dx);
              const T* src = irow + dx;
              for (int xx = r.lo; xx < r.hi; ++xx) orow[xx] += wv * src[xx];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvBackward<T> conv2d_backward(const BasicTensor4<T>& x, const ConvParams<T>& p, const BasicTensor4<T>& grad_out,
                                bool want_grad_x) {
  require_shape(x.c() == p.in_c(), "conv backward: input channels mismatch");
  require_shape(grad_out.shape() == Shape4{x.n(), p.out_c(), x.h(), x.w()}, "conv backward: grad_out shape mismatch");
  const int pad = p.kh() / 2;
  const int H = x.h();
  const int W = x.w();
  ConvBackward<T> r;
  r.grad = ConvParams<T>::zeros(p.out_c(), p.in_c(), p.kh(), p.kw());
  if (want_grad_x) r.grad_x = BasicTensor4<T>(x.shape());
  std::vector<T> lanes(static_cast<std::size_t>(W));

  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < p.out_c(); ++o) {
      const T* gp = grad_out.plane(n, o);
      T bsum{};
      for (std::size_t i = 0; i < grad_out.shape().plane(); ++i) bsum += gp[i];
      r.grad.bias[o] += bsum;

      for (int c = 0; c < p.in_c(); ++c) {
        const T* ip = x.plane(n, c);
        T* gw = r.grad.weight.plane(o, c);
        for (int ky = 0; ky < p.kh(); ++ky) {
          const int dy = ky - pad;
          const auto ry = valid_range(H, dy);
          for (int kx = 0; kx < p.kw(); ++kx) {
            const int dx = kx - pad;
            const auto rx = valid_range(W, dx);
            // Column-wise partial sums vectorize; the final lane sum keeps a
            // fixed order.
            std::fill(lanes.begin(), lanes.end(), T{});
            for (int y = ry.lo; y < ry.hi; ++y) {
              const T* grow = gp + static_cast<std::size_t>(y) * W;
              const T* irow = ip + static_cast<std::size_t>(y + dy) * W + dx;
              for (int xx = rx.lo; xx < rx.hi; ++xx) lanes[xx] += grow[xx] * irow[xx];
            }
            T acc{};
            for (int xx = rx.lo; xx < rx.hi; ++xx) acc += lanes[xx];
            gw[ky * p.kw() + kx] += acc;
          }
        }
      }
    }
    if (!want_grad_x) continue;
    for (int c = 0; c < p.in_c(); ++c) {
      T* gx = r.grad_x.plane(n, c);
      for (int o = 0; o < p.out_c(); ++o) {
        const T* gp = grad_out.plane(n, o);
        const T* wk = p.weight.plane(o, c);
        for (int ky = 0; ky < p.kh(); ++ky) {
          const int dy = ky - pad;
          const auto ry = valid_range(H, dy);
          for (int kx = 0; kx < p.kw(); ++kx) {
            const int dx = kx - pad;
            const auto rx = valid_range(W, dx);
            const T wv = wk[ky * p.kw() + kx];
            for (int y = ry.lo; y < ry.hi; ++y) {
              const T* grow = gp + static_cast<std::size_t>(y) * W;
              T* xrow = gx + static_cast<std::size_t>(y + dy) * W + dx;
              for (int xx = rx.lo; xx < rx.hi; ++xx) xrow[xx] += wv * grow[xx];
            }
          }
        }
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor4<T> upconv2x2_forward(const BasicTensor4<T>& x, const ConvParams<T>& p) {
  require_shape(x.c() == p.in_c(), "upconv input channels mismatch");
  require_shape(p.kh() == 2 && p.kw() == 2, "upconv kernel must be 2x2");
  const int H = x.h();
  const int W = x.w();
  const int W2 = 2 * W;
  BasicTensor4<T> out(x.n(), p.out_c(), 2 * H, W2);
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < p.out_c(); ++o) {
      T* op = out.plane(n, o);
      std::fill(op, op + out.shape().plane(), p.bias[o]);
      for (int c = 0; c < p.in_c(); ++c) {
        const T* ip = x.plane(n, c);
        const T* wk = p.weight.plane(o, c);
        for (int i = 0; i < H; ++i) {
          const T* irow = ip + static_cast<std::size_t>(i) * W;
          T* row0 = op + static_cast<std::size_t>(2 * i) * W2;
          T* row1 = row0 + W2;
          for (int j = 0; j < W; ++j) {
            const T v = irow[j];
            row0[2 * j] += v * wk[0];
            row0[2 * j + 1] += v * wk[1];
            row1[2 * j] += v * wk[2];
            row1[2 * j + 1] += v * wk[3];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvBackward<T> upconv2x2_backward(const BasicTensor4<T>& x, const ConvParams<T>& p, const BasicTensor4<T>& grad_out,
                                   bool want_grad_x) {
  require_shape(grad_out.shape() == Shape4{x.n(), p.out_c(), 2 * x.h(), 2 * x.w()}, "upconv backward: grad_out shape mismatch");
  const int H = x.h();
  const int W = x.w();
  const int W2 = 2 * W;
  ConvBackward<T> r;
  r.grad = ConvParams<T>::zeros(p.out_c(), p.in_c(), 2, 2);
  if (want_grad_x) r.grad_x = BasicTensor4<T>(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < p.out_c(); ++o) {
      const T* gp = grad_out.plane(n, o);
      T bsum{};
      for (std::size_t i = 0; i < grad_out.shape().plane(); ++i) bsum += gp[i];
      r.grad.bias[o] += bsum;
      for (int c = 0; c < p.in_c(); ++c) {
        const T* ip = x.plane(n, c);
        T acc[4]{};
        for (int i = 0; i < H; ++i) {
          const T* irow = ip + static_cast<std::size_t>(i) * W;
          const T* g0 = gp + static_cast<std::size_t>(2 * i) * W2;
          const T* g1 = g0 + W2;
          for (int j = 0; j < W; ++j) {
            acc[0] += g0[2 * j] * irow[j];
            acc[1] += g0[2 * j + 1] * irow[j];
            acc[2] += g1[2 * j] * irow[j];
            acc[3] += g1[2 * j + 1] * irow[j];
          }
        }
        T* gw = r.grad.weight.plane(o, c);
        for (int k = 0; k < 4; ++k) gw[k] += acc[k];
      }
    }
    if (!want_grad_x) continue;
    for (int c = 0; c < p.in_c(); ++c) {
      T* gx = r.grad_x.plane(n, c);
      for (int o = 0; o < p.out_c(); ++o) {
        const T* gp = grad_out.plane(n, o);
        const T* wk = p.weight.plane(o, c);
        for (int i = 0; i < H; ++i) {
          T* xrow = gx + static_cast<std::size_t>(i) * W;
          const T* g0 = gp + static_cast<std::size_t>(2 * i) * W2;
          const T* g1 = g0 + W2;
          for (int j = 0; j < W; ++j)
            xrow[j] += g0[2 * j] * wk[0] + g0[2 * j + 1] * wk[1] + g1[2 * j] * wk[2] + g1[2 * j + 1] * wk[3];
        }
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor4<T> maxpool2_forward(const BasicTensor4<T>& x, std::vector<std::uint32_t>& argmax) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0)
    throw Error(ErrorCode::OddSpatialDims, "max pooling needs even extents, got " + x.shape().str());
  const int H2 = x.h() / 2;
  const int W2 = x.w() / 2;
  const int W = x.w();
  BasicTensor4<T> out(x.n(), x.c(), H2, W2);
  argmax.resize(out.size());
  std::size_t k = 0;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const T* ip = x.plane(n, c);
      T* op = out.plane(n, c);
      for (int i = 0; i < H2; ++i)
        for (int j = 0; j < W2; ++j, ++k) {
          const std::uint32_t base = static_cast<std::uint32_t>(2 * i * W + 2 * j);
          const std::uint32_t cand[4] = {base, base + 1, base + static_cast<std::uint32_t>(W),
                                         base + static_cast<std::uint32_t>(W) + 1};
          std::uint32_t best = cand[0];
          for (int q = 1; q < 4; ++q)
            if (ip[cand[q]] > ip[best]) best = cand[q];
          op[static_cast<std::size_t>(i) * W2 + j] = ip[best];
          argmax[k] = best;
        }
    }
  return out;
}

template <typename T>
BasicTensor4<T> maxpool2_backward(const Shape4& input_shape, const std::vector<std::uint32_t>& argmax,
                                  const BasicTensor4<T>& grad_out) {
  require_shape(argmax.size() == grad_out.size(), "maxpool backward: argmax size mismatch");
  BasicTensor4<T> gx(input_shape);
  std::size_t k = 0;
  for (int n = 0; n < grad_out.n(); ++n)
    for (int c = 0; c < grad_out.c(); ++c) {
      const T* gp = grad_out.plane(n, c);
      T* xp = gx.plane(n, c);
      for (std::size_t i = 0; i < grad_out.shape().plane(); ++i, ++k) xp[argmax[k]] += gp[i];
    }
  return gx;
}

template <typename T>
BasicTensor4<T> leaky_relu_forward(const BasicTensor4<T>& x) {
  BasicTensor4<T> out(x.shape());
  const T slope = static_cast<T>(kLeakySlope);
  const T* in = x.data();
  T* o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = in[i] > T{} ? in[i] : slope * in[i];
  return out;
}

template <typename T>
BasicTensor4<T> leaky_relu_backward(const BasicTensor4<T>& x, const BasicTensor4<T>& grad_out) {
  require_shape(x.shape() == grad_out.shape(), "leaky relu backward: shape mismatch");
  BasicTensor4<T> gx(x.shape());
  const T slope = static_cast<T>(kLeakySlope);
  for (std::size_t i = 0; i < x.size(); ++i) gx.data()[i] = x.data()[i] > T{} ? grad_out.data()[i] : slope * grad_out.data()[i];
  return gx;
}

template <typename T>
BasicTensor4<T> concat_forward(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  require_shape(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(),
                "concat operands differ: " + a.shape().str() + " vs " + b.shape().str());
  BasicTensor4<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  const std::size_t plane = a.shape().plane();
  for (int n = 0; n < a.n(); ++n) {
    std::copy(a.plane(n, 0), a.plane(n, 0) + plane * a.c(), out.plane(n, 0));
    std::copy(b.plane(n, 0), b.plane(n, 0) + plane * b.c(), out.plane(n, a.c()));
  }
  return out;
}

template <typename T>
void concat_backward(const BasicTensor4<T>& grad_out, int a_channels, BasicTensor4<T>& grad_a, BasicTensor4<T>& grad_b) {
  const int b_channels = grad_out.c() - a_channels;
  require_shape(a_channels >= 1 && b_channels >= 1, "concat backward: bad channel split");
  grad_a = BasicTensor4<T>(grad_out.n(), a_channels, grad_out.h(), grad_out.w());
  grad_b = BasicTensor4<T>(grad_out.n(), b_channels, grad_out.h(), grad_out.w());
  const std::size_t plane = grad_out.shape().plane();
  for (int n = 0; n < grad_out.n(); ++n) {
    std::copy(grad_out.plane(n, 0), grad_out.plane(n, 0) + plane * a_channels, grad_a.plane(n, 0));
    std::copy(grad_out.plane(n, a_channels), grad_out.plane(n, a_channels) + plane * b_channels, grad_b.plane(n, 0));
  }
}

template <typename T>
LossResult<T> l2_loss(const BasicTensor4<T>& pred, const BasicTensor4<T>& target) {
  require_shape(pred.shape() == target.shape(), "l2 loss: " + pred.shape().str() + " vs " + target.shape().str());
  LossResult<T> r;
  r.grad = BasicTensor4<T>(pred.shape());
  const double inv = 1.0 / static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
    sum += d * d;
    r.grad.data()[i] = static_cast<T>(2.0 * d * inv);
  }
  r.loss = sum * inv;
  return r;
}

#define ESRIE_INSTANTIATE_LAYERS(T)                                                                                  \
  template BasicTensor4<T> conv2d_forward(const BasicTensor4<T>&, const ConvParams<T>&);                             \
  template ConvBackward<T> conv2d_backward(const BasicTensor4<T>&, const ConvParams<T>&, const BasicTensor4<T>&, bool); \
  template BasicTensor4<T> upconv2x2_forward(const BasicTensor4<T>&, const ConvParams<T>&);                          \
  template ConvBackward<T> upconv2x2_backward(const BasicTensor4<T>&, const ConvParams<T>&, const BasicTensor4<T>&,    \
                                              bool);                                                                 \
  template BasicTensor4<T> maxpool2_forward(const BasicTensor4<T>&, std::vector<std::uint32_t>&);                    \
  template BasicTensor4<T> maxpool2_backward(const Shape4&, const std::vector<std::uint32_t>&, const BasicTensor4<T>&); \
  template BasicTensor4<T> leaky_relu_forward(const BasicTensor4<T>&);                                               \
  template BasicTensor4<T> leaky_relu_backward(const BasicTensor4<T>&, const BasicTensor4<T>&);                      \
  template BasicTensor4<T> concat_forward(const BasicTensor4<T>&, const BasicTensor4<T>&);                           \
  template void concat_backward(const BasicTensor4<T>&, int, BasicTensor4<T>&, BasicTensor4<T>&);                    \
  template LossResult<T> l2_loss(const BasicTensor4<T>&, const BasicTensor4<T>&);

ESRIE_INSTANTIATE_LAYERS(float)
ESRIE_INSTANTIATE_LAYERS(double)

#undef ESRIE_INSTANTIATE_LAYERS

}  // namespace esrie::nn
