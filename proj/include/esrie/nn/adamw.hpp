#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace esrie::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay: theta <- theta - lr*wd*theta, then the
/// bias-corrected adaptive step. Moments are kept in double precision.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count() const noexcept { return t_; }

  /// One update over a list of parameter blocks and matching gradient blocks.
  /// The block list (count and sizes) must stay the same across calls.
  void step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads);

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace esrie::nn
