#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "esrie/image.hpp"
#include "esrie/network.hpp"
#include "esrie/quant_primitives.hpp"
#include "esrie/training.hpp"

namespace esrie::quant {

/// Real multiplier M realized as m * 2^-shift with m in [2^30, 2^31).
/// apply() rounds half away from zero.
struct FixedMultiplier {
  std::int64_t m = 0;
  int shift = 0;

  static FixedMultiplier from_real(double M);
  double real() const;
  std::int64_t apply(std::int64_t acc) const;
};

__extension__ using int128 = __int128;

/// Rounding right shift (half away from zero); left shift when n < 0.
std::int64_t rounding_shift(int128 v, int n);

/// Observed output range per layer of one branch.
struct BranchStats {
  std::vector<float> min;
  std::vector<float> max;
};

struct CalibrationStats {
  BranchStats despeckle;
  BranchStats deblur;
  std::size_t samples = 0;

  /// Elementwise min/max union; an empty side adopts the other.
  void merge(const CalibrationStats& other);
};

/// Float forward over every image, recording per-layer output ranges. The
/// deblur branch observes despeckle outputs for fused models and the raw
/// images otherwise. Throws EmptyCalibrationSet for no images.
CalibrationStats calibrate(const net::Model& model, std::span<const Image> images, int threads = 1);

/// Per layer: index of the layer whose calibrated range sets that layer's
/// output parameters, or -1 for the fixed display parameters (input and
/// branch output). Pool outputs follow their input, and the two operands
/// of every concat share one group.
std::vector<int> activation_owners(const net::BranchDescriptor& d);

/// Activation parameters for every layer output of both branches.
struct QuantParams {
  std::vector<ActivationQuant> despeckle;
  std::vector<ActivationQuant> deblur;

  const std::vector<ActivationQuant>& of(net::Branch b) const { return b == net::Branch::Deblur ? deblur : despeckle; }
};

QuantParams choose_quant_params(const net::Model& model, const CalibrationStats& stats);

/// Weight fake quantization plus activation fake quantization at the tensors
/// the integer path materializes (activation outputs, upsampling outputs and
/// the branch output).
net::FakeQuant make_fake_quant(const net::BranchDescriptor& d, const std::vector<ActivationQuant>& params);

/// Int8 model: per-tensor symmetric weights (float weights replaced by their
/// dequantized values) plus the activation parameters.
net::Model quantize_model(const net::Model& model, const QuantParams& params);

/// Integer-only execution plan of one branch, compiled from an Int8 model.
class IntegerBranch {
 public:
  IntegerBranch();
  IntegerBranch(const IntegerBranch&);
  IntegerBranch(IntegerBranch&&) noexcept;
  IntegerBranch& operator=(const IntegerBranch&);
  IntegerBranch& operator=(IntegerBranch&&) noexcept;
  ~IntegerBranch();

  static IntegerBranch compile(const net::Model& model, net::Branch branch);

  /// uint8 input plane (h x w, display scale) -> uint8 output plane.
  std::vector<std::uint8_t> run(std::span<const std::uint8_t> input, int height, int width,
                                net::LayerTimes* times = nullptr) const;
  int spatial_multiple() const { return multiple_; }
  /// Realized requantization multipliers next to their real targets.
  std::vector<std::pair<double, double>> multipliers() const;

  struct Op;

 private:
  std::vector<Op> ops_;
  int multiple_ = 1;
};

/// Routes integer convolutions through the portable kernels instead of the
/// wide-vector ones. Results are identical either way.
void use_portable_integer_kernels(bool on);
bool wide_integer_kernels_available();

/// Compiled branches of one Int8 model.
struct IntegerProgram {
  IntegerBranch despeckle;
  IntegerBranch deblur;

  static IntegerProgram compile(const net::Model& model);
  Image run(const Image& img, net::Branch branch, net::LayerTimes* times = nullptr) const;
};

/// Display8 in, Display8 out through the integer path. Throws
/// MissingQuantParams unless the model is Int8 with activation parameters.
Image quantized_forward(const net::Model& model, const Image& img, net::Branch branch);

struct QatConfig {
  training::TrainConfig train;  ///< batch, patch, lr, seed, threads
  std::size_t steps = 200;      ///< per branch
  std::size_t eval_every = 25;
  int validation_pairs = 8;
};

struct QatResult {
  net::Model model;  ///< float model to pass to quantize_model
  double despeckle_loss_before = 0.0;
  double despeckle_loss_after = 0.0;
  double deblur_loss_before = 0.0;
  double deblur_loss_after = 0.0;
};

/// Fine-tunes both branches with fake quantization under fixed activation
/// parameters. Snapshots (including the starting point) are scored by the
/// integer-path loss on held-out pairs and the best one is kept.
QatResult qat_finetune(const net::Model& model, const QuantParams& params, const training::Corpus& corpus,
                       const QatConfig& cfg);

/// Mean squared error in [0,1] units of the integer path over pairs.
double integer_path_loss(const net::Model& int8_model, net::Branch branch, std::span<const training::ImagePair> pairs);

}  // namespace esrie::quant
