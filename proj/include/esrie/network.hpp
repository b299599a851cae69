#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "esrie/image.hpp"
#include "esrie/nn/layers.hpp"
#include "esrie/quant_primitives.hpp"

namespace esrie::net {

inline constexpr std::size_t kParamBudget = 20000;

enum class LayerKind : std::uint8_t {
  Input = 0,
  Conv3x3 = 1,
  Conv1x1 = 2,
  UpConv2x2 = 3,
  MaxPool2 = 4,
  LeakyReLU = 5,
  Concat = 6,
  Output = 7,
};

std::string_view to_string(LayerKind kind);

/// One layer record. extents = {out_c, in_c, kh, kw} for Conv3x3, Conv1x1 and
/// UpConv2x2; {channels, 0, 0, 0} for Input; {residual, 0, 0, 0} for Output
/// (residual != 0 adds the branch input to the last conv output); zeros
/// otherwise.
struct LayerSpec {
  LayerKind kind = LayerKind::Input;
  std::array<std::uint32_t, 4> extents{};

  bool has_params() const noexcept {
    return kind == LayerKind::Conv3x3 || kind == LayerKind::Conv1x1 || kind == LayerKind::UpConv2x2;
  }
  bool operator==(const LayerSpec&) const = default;
};

/// Layers run in order as a small stack machine: MaxPool2 pushes its input
/// onto a skip stack and Concat pops the most recent skip, producing
/// [skip, current] along the channel axis.
struct BranchDescriptor {
  std::vector<LayerSpec> layers;

  bool residual() const { return !layers.empty() && layers.back().kind == LayerKind::Output && layers.back().extents[0] != 0; }
  std::size_t param_layer_count() const;
  /// Spatial divisor the branch needs (2^pool count).
  int spatial_multiple() const;
  void validate() const;
  bool operator==(const BranchDescriptor&) const = default;
};

struct ArchitectureDescriptor {
  BranchDescriptor despeckle;
  BranchDescriptor deblur;

  int channel_width() const;
  int depth_levels() const;
  bool operator==(const ArchitectureDescriptor&) const = default;
};

/// Despeckle: 4 encoder levels (Conv-LReLU-Conv-LReLU-MaxPool), 2 bottleneck
/// Conv-LReLU, 4 decoder levels (UpConv-Concat-Conv-LReLU), 1x1 output conv.
/// Deblur: 5 Conv-LReLU blocks and a 3x3 conv to one channel added to the input.
ArchitectureDescriptor default_descriptor(int channels = 8, int depth = 4);

template <typename T>
struct BranchParams {
  std::vector<nn::ConvParams<T>> layers;  // one per parametric layer, in order

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
  template <typename U>
  BranchParams<U> cast() const {
    BranchParams<U> out;
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    return out;
  }
};

/// Integer-side data of a quantized branch: int8 weights per parametric layer
/// and activation parameters for the output of every layer.
struct BranchQuant {
  std::vector<quant::QuantizedTensor> weights;
  std::vector<quant::ActivationQuant> activations;
};

enum class Precision : std::uint8_t { Float32 = 0, Int8Quantized = 1 };
enum class Branch { Despeckle, Deblur, Fused };

std::string_view to_string(Branch b);
Branch parse_branch(std::string_view text);

struct Model {
  ArchitectureDescriptor descriptor;
  BranchParams<float> despeckle;
  BranchParams<float> deblur;
  Precision precision = Precision::Float32;
  bool fused = false;
  /// Present iff precision == Int8Quantized. Float parameters of a quantized
  /// model hold the dequantized weights.
  std::optional<BranchQuant> despeckle_quant;
  std::optional<BranchQuant> deblur_quant;

  const BranchDescriptor& descriptor_of(Branch b) const { return b == Branch::Deblur ? descriptor.deblur : descriptor.despeckle; }
  const BranchParams<float>& params_of(Branch b) const { return b == Branch::Deblur ? deblur : despeckle; }
  BranchParams<float>& params_of(Branch b) { return b == Branch::Deblur ? deblur : despeckle; }
  const std::optional<BranchQuant>& quant_of(Branch b) const { return b == Branch::Deblur ? deblur_quant : despeckle_quant; }
};

/// Zero-initialized parameters shaped after a descriptor.
template <typename T>
BranchParams<T> zero_params(const BranchDescriptor& d);

/// Default architecture with He-uniform weights (bound sqrt(6 / fan_in),
/// fan_in = taps per output element) and zero biases. Throws BudgetExceeded
/// if the parameter count exceeds kParamBudget.
Model build_default(std::uint64_t seed = 1);

std::size_t param_count(const Model& m);
std::size_t param_count(const BranchDescriptor& d);

/// 2 x multiply-accumulates over conv and upconv taps for an h x w input.
std::uint64_t flop_count(const BranchDescriptor& d, int h, int w);
std::uint64_t flop_count(const Model& m, int h, int w);

// ---------------------------------------------------------------------------
// Branch execution

/// Optional fake quantization applied during float execution: weights are
/// quantize-dequantized per tensor, and every layer output with an entry is
/// quantize-dequantized with the given parameters (straight-through gradients
/// inside the representable range, zero outside).
struct FakeQuant {
  bool weights = false;
  std::vector<std::optional<quant::ActivationQuant>> activations;  // per layer
};

template <typename T>
struct BranchTrace {
  std::vector<nn::BasicTensor4<T>> outputs;                 // per layer
  std::vector<std::vector<std::uint32_t>> argmax;           // per layer (pools only)
  std::vector<std::vector<std::uint8_t>> masks;             // per layer (fake-quant only)
  std::vector<nn::ConvParams<T>> effective;                 // weights used, per parametric layer
};

/// Accumulates wall time per layer when passed to run_branch.
struct LayerTimes {
  std::vector<double> seconds;
};

/// Runs one branch. When `trace` is non-null every intermediate needed by
/// backward_branch is retained.
template <typename T>
nn::BasicTensor4<T> run_branch(const BranchDescriptor& d, const BranchParams<T>& p, const nn::BasicTensor4<T>& input,
                               BranchTrace<T>* trace = nullptr, const FakeQuant* fq = nullptr,
                               LayerTimes* times = nullptr);

/// Parameter gradients of a traced forward pass given dL/d(output).
template <typename T>
BranchParams<T> backward_branch(const BranchDescriptor& d, const BranchParams<T>& p, const BranchTrace<T>& trace,
                                const nn::BasicTensor4<T>& grad_output);

// ---------------------------------------------------------------------------
// Image-level inference

struct ForwardOptions {
  bool pad = true;  ///< reflect-pad to the branch's spatial multiple and crop back
  LayerTimes* times = nullptr;
};

/// Display8 -> [0,1] -> branch(es) -> clamp [0,1] -> Display8 (rounded).
/// Fused runs deblur on the rounded despeckle output.
Image forward(const Model& m, const Image& img, Branch branch, const ForwardOptions& opt = {});

/// Reflect padding to the next multiple; returns the input when already aligned.
Image pad_to_multiple(const Image& img, int multiple);

nn::Tensor4 image_to_tensor(const Image& img);
Image tensor_to_display(const nn::Tensor4& t, const Image& like);

// ---------------------------------------------------------------------------
// Checkpoints

/// "ESNN1" | u16 version | u8 precision | u8 fused | per branch: u32 count,
/// layer records (u8 kind, 4 x u32 extents) | [int8 only: per branch, per
/// layer f32 scale + i32 zero-point] | payloads per parametric layer
/// (f32 weights + f32 bias, or f32 scale + i8 weights + f32 bias) | u32 CRC32.
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_model(const Model& m);
Model decode_model(std::span<const std::uint8_t> bytes);
void save(const Model& m, const std::filesystem::path& path);
Model load(const std::filesystem::path& path);

/// Bytes of weight tensors in the payload (excluding biases and scales).
std::size_t weight_payload_bytes(const Model& m);

}  // namespace esrie::net
