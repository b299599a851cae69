#include "esrie/nn/adamw.hpp"

#include <cmath>

#include "esrie/error.hpp"

namespace esrie::nn {

void AdamW::step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads) {
  if (params.size() != grads.size()) throw Error(ErrorCode::ShapeMismatch, "AdamW: parameter/gradient block count differs");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t b = 0; b < params.size(); ++b) {
      m_[b].assign(params[b].size(), 0.0);
      v_[b].assign(params[b].size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "AdamW: parameter block count changed");

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    auto g = grads[b];
    if (p.size() != g.size() || p.size() != m_[b].size())
      throw Error(ErrorCode::ShapeMismatch, "AdamW: block " + std::to_string(b) + " size mismatch");
    auto& m = m_[b];
    auto& v = v_[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      const double theta = static_cast<double>(p[i]) * decay;
      p[i] = static_cast<float>(theta - cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
    }
  }
}

}  // namespace esrie::nn
