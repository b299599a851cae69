#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "esrie/image.hpp"
#include "esrie/network.hpp"
#include "esrie/rng.hpp"
#include "esrie/speckle.hpp"

namespace esrie::training {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  int patch_size = 64;          ///< >= 32, divisible by 16
  int realizations_k = 2;       ///< despeckle pairing pool, >= 2
  int patches_per_source = 32;  ///< an epoch draws this many patches per source
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  int threads = 1;
  int average_window = 50;      ///< running-average window for best-model selection
  bool average_targets = false; ///< despeckle target = mean of the k-1 other realizations
  std::size_t max_steps = 0;    ///< 0 = no cap beyond epochs
  int checkpoint_every = 0;     ///< steps between snapshots, 0 = off
  std::filesystem::path checkpoint_dir;
  std::filesystem::path manifest;

  void validate() const;
};

enum class CorpusRole { DespeckleSource, DeblurSource };

std::string_view to_string(CorpusRole role);
CorpusRole parse_corpus_role(std::string_view text);

struct CorpusEntry {
  CorpusRole role = CorpusRole::DespeckleSource;
  std::filesystem::path path;
  std::map<std::string, std::string> overrides;  ///< simulator / degradation keys
};

/// Text form: one entry per line, `role<TAB>path<TAB>key=value...`; `#`
/// starts a comment. Relative paths resolve against the manifest directory.
struct CorpusManifest {
  std::vector<CorpusEntry> entries;
};

CorpusManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
CorpusManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

struct DespeckleSource {
  Image echo;  ///< linear amplitude echogenicity
  SpeckleSimConfig sim;
};

struct DeblurSource {
  Image image;  ///< Display8
  BlurConfig blur;
};

struct Corpus {
  std::vector<DespeckleSource> despeckle;
  std::vector<DeblurSource> deblur;
};

/// Loads every referenced image. Display8 despeckle sources are inverted to
/// linear amplitude; overrides apply on top of the given defaults. Unknown
/// override keys throw UnknownKey; missing files throw IoError.
Corpus load_corpus(const CorpusManifest& manifest, const SpeckleSimConfig& sim = {}, const BlurConfig& blur = {});

/// `sources` random phantoms (size x size). Each one is a despeckle source
/// and, after one B-mode simulation, a deblur source.
Corpus synthetic_corpus(int sources, int size, std::uint64_t seed, const SpeckleSimConfig& sim = {},
                        const BlurConfig& blur = {});

/// Writes the synthetic corpus images (.esri echo maps, .pgm B-mode images)
/// and a manifest into `dir`; returns the manifest path.
std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, int sources, int size,
                                             std::uint64_t seed);

struct ImagePair {
  Image input;
  Image target;
};

/// k realizations of the echo map; a uniformly drawn input index and a
/// distinct uniformly drawn target index, both cropped (patch x patch) at
/// one random location. With `average_targets` the target is the mean of
/// all other realizations.
ImagePair make_despeckle_pair(const Image& echo, const SpeckleSimConfig& sim, int k, int patch, Rng& rng,
                              bool average_targets = false);

/// A random patch O of a Display8 image and its degraded copy: {degrade(O), O}.
ImagePair make_deblur_pair(const Image& image, const BlurConfig& blur, int patch, Rng& rng);

struct TensorPair {
  nn::Tensor4 input;
  nn::Tensor4 target;
};

using PairSampler = std::function<TensorPair(Rng&)>;

struct StepInfo {
  std::size_t step = 0;
  double loss = 0.0;
  double running_average = 0.0;
};

struct TrainHooks {
  const net::FakeQuant* fake_quant = nullptr;
  std::function<void(const StepInfo&, const net::Model&)> on_step;
};

struct TrainResult {
  net::Model model;
  std::vector<double> losses;  ///< per step
  std::size_t best_step = 0;   ///< number of updates in the selected model
  double best_average = 0.0;
};

/// Generic loop shared by both trainers. Sample j of step t draws from
/// Rng(derive_seed(cfg.seed, t * batch + j)); per-sample gradients are summed
/// in sample order, so results do not depend on cfg.threads. The returned
/// model is the parameter set right after the update that closed the lowest
/// full running-average window (the initial model when no step runs).
TrainResult train_branch(const net::Model& model, net::Branch branch, const PairSampler& sampler,
                         std::size_t steps_per_epoch, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Steps per epoch for a corpus role: ceil(sources * patches_per_source / batch).
std::size_t steps_per_epoch(std::size_t sources, const TrainConfig& cfg);

TrainResult train_despeckle(const net::Model& model, const Corpus& corpus, const TrainConfig& cfg,
                            const TrainHooks& hooks = {});
TrainResult train_deblur(const net::Model& model, const Corpus& corpus, const TrainConfig& cfg,
                         const TrainHooks& hooks = {});

/// Despeckle branch of `a`, deblur branch of `b`, fused = true.
net::Model fuse(const net::Model& a, const net::Model& b);

/// `step,loss` rows.
void write_loss_csv(const std::vector<double>& losses, const std::filesystem::path& path);

}  // namespace esrie::training
