#include "esrie/training.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "esrie/error.hpp"
#include "esrie/image_io.hpp"
#include "esrie/nn/adamw.hpp"
#include "esrie/parallel.hpp"
#include "esrie/phantom.hpp"

namespace esrie::training {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto bad = [](const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); };
  if (epochs < 0) bad("epochs must be >= 0");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (patch_size < 32 || patch_size % 16 != 0) bad("patch_size must be >= 32 and divisible by 16");
  if (realizations_k < 2) bad("realizations_k must be >= 2");
  if (patches_per_source < 1) bad("patches_per_source must be >= 1");
  if (!(lr > 0.0)) bad("lr must be positive");
  if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
  if (threads < 1) bad("threads must be >= 1");
  if (average_window < 1) bad("average_window must be >= 1");
  if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
}

std::string_view to_string(CorpusRole role) {
  return role == CorpusRole::DespeckleSource ? "despeckle_source" : "deblur_source";
}

CorpusRole parse_corpus_role(std::string_view text) {
  if (text == "despeckle_source") return CorpusRole::DespeckleSource;
  if (text == "deblur_source") return CorpusRole::DeblurSource;
  throw Error(ErrorCode::InvalidConfig, "unknown corpus role '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, v);
  if (r.ec != std::errc{} || r.ptr != end || !std::isfinite(v))
    throw Error(ErrorCode::InvalidConfig, "override '" + key + "' expects a number, got '" + value + "'");
  return v;
}

void apply_overrides(const std::map<std::string, std::string>& overrides, SpeckleSimConfig& sim, BlurConfig& blur) {
  for (const auto& [key, value] : overrides) {
    if (key == "sigma_x") sim.sigma_x = parse_double(key, value);
    else if (key == "sigma_z") sim.sigma_z = parse_double(key, value);
    else if (key == "cycles") sim.cycles = parse_double(key, value);
    else if (key == "noise_std") sim.noise_std = parse_double(key, value);
    else if (key == "floor_db") sim.floor_db = parse_double(key, value);
    else if (key == "blur_sigma_lo") blur.blur_sigma_lo = parse_double(key, value);
    else if (key == "blur_sigma_hi") blur.blur_sigma_hi = parse_double(key, value);
    else if (key == "alpha_lo") blur.alpha_lo = parse_double(key, value);
    else if (key == "alpha_hi") blur.alpha_hi = parse_double(key, value);
    else throw Error(ErrorCode::UnknownKey, "unknown corpus override '" + key + "'");
  }
  sim.validate();
  blur.validate();
}

}  // namespace

CorpusManifest parse_manifest(std::string_view text, const fs::path& base_dir) {
  CorpusManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() < 2 || fields[1].empty())
      throw Error(ErrorCode::InvalidConfig, "manifest line " + std::to_string(lineno) + ": expected role<TAB>path");
    CorpusEntry e;
    e.role = parse_corpus_role(fields[0]);
    e.path = fields[1];
    if (e.path.is_relative() && !base_dir.empty()) e.path = base_dir / e.path;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      if (fields[i].empty()) continue;
      const auto eq = fields[i].find('=');
      if (eq == std::string::npos || eq == 0)
        throw Error(ErrorCode::InvalidConfig, "manifest line " + std::to_string(lineno) + ": expected key=value");
      e.overrides[fields[i].substr(0, eq)] = fields[i].substr(eq + 1);
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

CorpusManifest read_manifest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.parent_path());
}

void write_manifest(const CorpusManifest& manifest, const fs::path& path) {
  std::string text;
  for (const auto& e : manifest.entries) {
    text += std::string(to_string(e.role)) + "\t" + e.path.generic_string();
    for (const auto& [k, v] : e.overrides) text += "\t" + k + "=" + v;
    text += "\n";
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Corpus load_corpus(const CorpusManifest& manifest, const SpeckleSimConfig& sim, const BlurConfig& blur) {
  Corpus c;
  for (const auto& e : manifest.entries) {
    SpeckleSimConfig s = sim;
    BlurConfig b = blur;
    apply_overrides(e.overrides, s, b);
    Image img = read_image(e.path);
    if (e.role == CorpusRole::DespeckleSource) {
      switch (img.domain()) {
        case Domain::LinearAmplitude: break;
        case Domain::Display8: img = display_to_linear(img, -s.floor_db); break;
        case Domain::Decibel: {
          std::vector<float> lin(img.data().size());
          for (std::size_t i = 0; i < lin.size(); ++i) lin[i] = static_cast<float>(std::pow(10.0, img.data()[i] / 20.0));
          img = img.with_data(Domain::LinearAmplitude, std::move(lin));
          break;
        }
      }
      c.despeckle.push_back({std::move(img), s});
    } else {
      if (img.domain() == Domain::Decibel) img = to_display(img, -s.floor_db);
      if (img.domain() != Domain::Display8)
        throw Error(ErrorCode::InvalidImage, e.path.string() + ": deblur sources must be display images");
      c.deblur.push_back({std::move(img), b});
    }
  }
  return c;
}

Corpus synthetic_corpus(int sources, int size, std::uint64_t seed, const SpeckleSimConfig& sim, const BlurConfig& blur) {
  if (sources < 1) throw Error(ErrorCode::EmptyCorpus, "synthetic corpus needs at least one source");
  Corpus c;
  for (int i = 0; i < sources; ++i) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    Image echo = make_phantom(random_phantom(size, size, s));
    SpeckleSimConfig cfg = sim;
    cfg.seed = derive_seed(s, 1);
    Image bmode = to_display(simulate_bmode(echo, cfg), -cfg.floor_db);
    c.despeckle.push_back({std::move(echo), sim});
    c.deblur.push_back({std::move(bmode), blur});
  }
  return c;
}

fs::path write_synthetic_corpus(const fs::path& dir, int sources, int size, std::uint64_t seed) {
  fs::create_directories(dir);
  const Corpus c = synthetic_corpus(sources, size, seed);
  CorpusManifest m;
  for (int i = 0; i < sources; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "source-%03d", i);
    write_image(c.despeckle[static_cast<std::size_t>(i)].echo, dir / (std::string(name) + ".esri"));
    write_image(c.deblur[static_cast<std::size_t>(i)].image, dir / (std::string(name) + ".pgm"));
    m.entries.push_back({CorpusRole::DespeckleSource, std::string(name) + ".esri", {}});
    m.entries.push_back({CorpusRole::DeblurSource, std::string(name) + ".pgm", {}});
  }
  const fs::path path = dir / "manifest.tsv";
  write_manifest(m, path);
  return path;
}

// ---------------------------------------------------------------------------
// Pairs

namespace {

void require_patch_fits(const Image& img, int patch) {
  if (img.width() < patch || img.height() < patch)
    throw Error(ErrorCode::ImageTooSmall, "source " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                                              " is smaller than the " + std::to_string(patch) + " px patch");
}

}  // namespace

ImagePair make_despeckle_pair(const Image& echo, const SpeckleSimConfig& sim, int k, int patch, Rng& rng,
                              bool average_targets) {
  require_patch_fits(echo, patch);
  SpeckleSimConfig cfg = sim;
  cfg.seed = rng.next_u64();
  const auto realizations = make_realizations(echo, cfg, k, 1);
  const auto input_index = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  auto target_index = static_cast<int>(rng.below(static_cast<std::uint64_t>(k - 1)));
  if (target_index >= input_index) ++target_index;
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(echo.width() - patch + 1)));
  const int z0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(echo.height() - patch + 1)));

  auto display = [&](int i) { return to_display(realizations[static_cast<std::size_t>(i)], -cfg.floor_db).crop(x0, z0, patch, patch); };
  ImagePair pair{display(input_index), {}};
  if (!average_targets) {
    pair.target = display(target_index);
    return pair;
  }
  std::vector<double> sum(static_cast<std::size_t>(patch) * patch, 0.0);
  for (int i = 0; i < k; ++i) {
    if (i == input_index) continue;
    const Image d = display(i);
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += d.data()[j];
  }
  std::vector<float> mean(sum.size());
  for (std::size_t j = 0; j < sum.size(); ++j) mean[j] = static_cast<float>(sum[j] / (k - 1));
  pair.target = pair.input.with_data(Domain::Display8, std::move(mean));
  return pair;
}

ImagePair make_deblur_pair(const Image& image, const BlurConfig& blur, int patch, Rng& rng) {
  require_patch_fits(image, patch);
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(image.width() - patch + 1)));
  const int z0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(image.height() - patch + 1)));
  Image original = image.crop(x0, z0, patch, patch);
  BlurConfig cfg = blur;
  cfg.seed = rng.next_u64();
  return {degrade(original, cfg), std::move(original)};
}

// ---------------------------------------------------------------------------
// Training loop

std::size_t steps_per_epoch(std::size_t sources, const TrainConfig& cfg) {
  const std::size_t patches = sources * static_cast<std::size_t>(cfg.patches_per_source);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  return (patches + batch - 1) / batch;
}

namespace {

bool all_finite(const net::BranchParams<float>& p) {
  for (const auto& l : p.layers) {
    for (float v : l.weight.storage())
      if (!std::isfinite(v)) return false;
    for (float v : l.bias)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

TrainResult train_branch(const net::Model& model, net::Branch branch, const PairSampler& sampler,
                         std::size_t steps_per_epoch, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (branch == net::Branch::Fused) throw Error(ErrorCode::InvalidConfig, "train one branch at a time");
  if (model.precision != net::Precision::Float32) throw Error(ErrorCode::InvalidConfig, "training needs a float model");

  std::size_t total = static_cast<std::size_t>(cfg.epochs) * steps_per_epoch;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);

  TrainResult result{model, {}, 0, 0.0};
  if (total == 0) return result;

  net::Model current = model;
  const auto& d = current.descriptor_of(branch);
  auto& params = current.params_of(branch);
  nn::AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  std::vector<std::span<float>> param_blocks;
  for (auto& l : params.layers) {
    param_blocks.emplace_back(l.weight.storage());
    param_blocks.emplace_back(l.bias);
  }

  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t window = std::min<std::size_t>(static_cast<std::size_t>(cfg.average_window), total);
  std::vector<double> sample_loss(batch);
  std::vector<net::BranchParams<float>> sample_grads(batch);
  double window_sum = 0.0;
  bool have_best = false;
  result.losses.reserve(total);

  for (std::size_t step = 0; step < total; ++step) {
    parallel_for(batch, cfg.threads, [&](std::size_t j) {
      Rng rng(derive_seed(cfg.seed, step * batch + j));
      const TensorPair pair = sampler(rng);
      net::BranchTrace<float> trace;
      const auto out = net::run_branch(d, params, pair.input, &trace, hooks.fake_quant);
      auto loss = nn::l2_loss(out, pair.target);
      sample_loss[j] = loss.loss;
      sample_grads[j] = net::backward_branch(d, params, trace, loss.grad);
    });

    double loss = 0.0;
    for (double l : sample_loss) loss += l;
    loss /= static_cast<double>(batch);
    if (!std::isfinite(loss))
      throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at step " + std::to_string(step) +
                                                (step > 0 ? " (previous loss " + std::to_string(result.losses.back()) + ")" : ""));

    auto& grad = sample_grads[0];
    for (std::size_t j = 1; j < batch; ++j)
      for (std::size_t k = 0; k < grad.layers.size(); ++k) {
        auto& gw = grad.layers[k].weight.storage();
        const auto& sw = sample_grads[j].layers[k].weight.storage();
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += sw[i];
        auto& gb = grad.layers[k].bias;
        const auto& sb = sample_grads[j].layers[k].bias;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += sb[i];
      }
    const float inv_batch = 1.0f / static_cast<float>(batch);
    std::vector<std::span<const float>> grad_blocks;
    for (auto& l : grad.layers) {
      for (auto& v : l.weight.storage()) v *= inv_batch;
      for (auto& v : l.bias) v *= inv_batch;
      grad_blocks.emplace_back(l.weight.storage());
      grad_blocks.emplace_back(l.bias);
    }
    opt.step(param_blocks, grad_blocks);
    if (!all_finite(params))
      throw Error(ErrorCode::NonFiniteWeights, "parameters became NaN/Inf after step " + std::to_string(step));

    result.losses.push_back(loss);
    window_sum += loss;
    if (result.losses.size() > window) window_sum -= result.losses[result.losses.size() - window - 1];
    const double average = window_sum / static_cast<double>(std::min(result.losses.size(), window));
    if (result.losses.size() >= window && (!have_best || average < result.best_average)) {
      have_best = true;
      result.best_average = average;
      result.best_step = step + 1;
      result.model.params_of(branch) = params;
    }
    if (hooks.on_step) hooks.on_step({step, loss, average}, current);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % static_cast<std::size_t>(cfg.checkpoint_every) == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step-%06zu.esnn", step + 1);
      fs::create_directories(cfg.checkpoint_dir);
      net::save(current, cfg.checkpoint_dir / name);
    }
  }
  return result;
}

TrainResult train_despeckle(const net::Model& model, const Corpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (corpus.despeckle.empty()) throw Error(ErrorCode::EmptyCorpus, "no despeckle sources in the corpus");
  for (const auto& s : corpus.despeckle) require_patch_fits(s.echo, cfg.patch_size);
  const PairSampler sampler = [&](Rng& rng) {
    const auto& src = corpus.despeckle[rng.below(corpus.despeckle.size())];
    const ImagePair pair = make_despeckle_pair(src.echo, src.sim, cfg.realizations_k, cfg.patch_size, rng, cfg.average_targets);
    return TensorPair{net::image_to_tensor(pair.input), net::image_to_tensor(pair.target)};
  };
  return train_branch(model, net::Branch::Despeckle, sampler, steps_per_epoch(corpus.despeckle.size(), cfg), cfg, hooks);
}

TrainResult train_deblur(const net::Model& model, const Corpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (corpus.deblur.empty()) throw Error(ErrorCode::EmptyCorpus, "no deblur sources in the corpus");
  for (const auto& s : corpus.deblur) require_patch_fits(s.image, cfg.patch_size);
  const PairSampler sampler = [&](Rng& rng) {
    const auto& src = corpus.deblur[rng.below(corpus.deblur.size())];
    const ImagePair pair = make_deblur_pair(src.image, src.blur, cfg.patch_size, rng);
    return TensorPair{net::image_to_tensor(pair.input), net::image_to_tensor(pair.target)};
  };
  return train_branch(model, net::Branch::Deblur, sampler, steps_per_epoch(corpus.deblur.size(), cfg), cfg, hooks);
}

net::Model fuse(const net::Model& a, const net::Model& b) {
  if (!(a.descriptor == b.descriptor)) throw Error(ErrorCode::DescriptorMismatch, "models come from different architectures");
  if (a.precision != net::Precision::Float32 || b.precision != net::Precision::Float32)
    throw Error(ErrorCode::DescriptorMismatch, "fuse expects float models");
  net::Model m = a;
  m.deblur = b.deblur;
  m.fused = true;
  return m;
}

void write_loss_csv(const std::vector<double>& losses, const fs::path& path) {
  std::string text = "step,loss\n";
  char row[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(row, sizeof row, "%zu,%.9g\n", i, losses[i]);
    text += row;
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace esrie::training
