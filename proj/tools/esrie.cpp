#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "esrie/baselines.hpp"
#include "esrie/error.hpp"
#include "esrie/image_io.hpp"
#include "esrie/metrics.hpp"
#include "esrie/network.hpp"
#include "esrie/parallel.hpp"
#include "esrie/phantom.hpp"
#include "esrie/quantization.hpp"
#include "esrie/report.hpp"
#include "esrie/roi.hpp"
#include "esrie/speckle.hpp"
#include "esrie/training.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace esrie;
using cli::KeySpec;
using cli::RunConfig;

namespace {

constexpr double kDisplayRangeDb = 55.0;

// ---------------------------------------------------------------------------
// Shared helpers

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// Any stored image as Display8 with the default dynamic range.
Image load_display(const fs::path& path) {
  const Image img = read_image(path);
  switch (img.domain()) {
    case Domain::Display8: return img;
    case Domain::Decibel: return to_display(img, kDisplayRangeDb);
    case Domain::LinearAmplitude: return to_display(to_decibel(img, -kDisplayRangeDb), kDisplayRangeDb);
  }
  return img;
}

/// Echo map in linear amplitude; Display8 inputs are inverted.
Image load_echo(const fs::path& path) {
  const Image img = read_image(path);
  if (img.domain() == Domain::LinearAmplitude) return img;
  return display_to_linear(img.domain() == Domain::Display8 ? img : to_display(img, kDisplayRangeDb), kDisplayRangeDb);
}

std::vector<KeySpec> sim_keys() {
  return {{"sigma_x", "2.0", "lateral beam std in pixels"},
          {"sigma_z", "2.5", "axial pulse std in pixels"},
          {"cycles", "3.0", "carrier periods within +-2 sigma_z"},
          {"noise_std", "1.0", "scatterer amplitude std"},
          {"floor_db", "-55.0", "log compression floor"}};
}

SpeckleSimConfig sim_config(const RunConfig& c) {
  SpeckleSimConfig s;
  s.sigma_x = c.real("sigma_x");
  s.sigma_z = c.real("sigma_z");
  s.cycles = c.real("cycles");
  s.noise_std = c.real("noise_std");
  s.floor_db = c.real("floor_db");
  s.seed = c.u64("seed");
  s.validate();
  return s;
}

std::vector<KeySpec> corpus_keys() {
  return {{"manifest", "", "corpus manifest; a synthetic corpus is used when empty"},
          {"corpus_sources", "32", "synthetic corpus size"},
          {"corpus_size", "128", "synthetic phantom edge length"},
          {"corpus_seed", "7", "synthetic corpus seed"}};
}

training::Corpus load_corpus(const RunConfig& c) {
  if (c.has("manifest")) return training::load_corpus(training::read_manifest(c.str("manifest")));
  return training::synthetic_corpus(static_cast<int>(c.integer("corpus_sources")), static_cast<int>(c.integer("corpus_size")),
                                    c.u64("corpus_seed"));
}

net::Model load_or_default(const RunConfig& c, std::string_view key) {
  return c.has(key) ? net::load(c.str(key)) : net::build_default(c.u64("seed"));
}

net::Branch resolve_branch(const RunConfig& c, const net::Model& m) {
  if (c.str("branch") == "auto") return m.fused ? net::Branch::Fused : net::Branch::Despeckle;
  return net::parse_branch(c.str("branch"));
}

// ---------------------------------------------------------------------------
// phantom / simulate / degrade

int cmd_phantom(const RunConfig& c, const fs::path& dir) {
  const std::string preset = c.str("preset");
  PhantomSpec spec;
  std::vector<RoiSpec> rois;
  if (preset == "cyst2") {
    spec = cyst2_phantom();
    rois = cyst2_rois();
  } else if (preset == "random") {
    spec = random_phantom(static_cast<int>(c.integer("width")), static_cast<int>(c.integer("height")), c.u64("seed"));
  } else {
    throw Error(ErrorCode::InvalidConfig, "preset must be cyst2 or random, got '" + preset + "'");
  }
  const Image echo = make_phantom(spec);
  write_image(echo, dir / "echo.esri");
  write_image(to_display(to_decibel(echo, -kDisplayRangeDb), kDisplayRangeDb), dir / "echo.pgm");
  write_roi_file(rois, dir / "rois.txt");
  std::cout << "phantom " << preset << " " << echo.width() << "x" << echo.height() << ", " << spec.inclusions.size()
            << " inclusions\n";
  return 0;
}

int cmd_simulate(const RunConfig& c, const fs::path& dir) {
  const SpeckleSimConfig sim = sim_config(c);
  const Image echo = c.has("input") ? load_echo(c.str("input")) : make_phantom(cyst2_phantom());
  const int k = static_cast<int>(c.integer("k"));
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "k must be at least 1");
  std::vector<Image> out(static_cast<std::size_t>(k));
  parallel_for(out.size(), static_cast<int>(c.integer("threads")),
               [&](std::size_t i) { out[i] = simulate_bmode(echo, realization_config(sim, i)); });
  std::string manifest = "# index file scatter_seed sigma_x sigma_z\n";
  for (int i = 0; i < k; ++i) {
    const std::string stem = "bmode_" + std::to_string(i);
    write_image(out[static_cast<std::size_t>(i)], dir / (stem + ".esri"));
    write_image(to_display(out[static_cast<std::size_t>(i)], -sim.floor_db), dir / (stem + ".pgm"));
    const SpeckleSimConfig r = realization_config(sim, static_cast<std::uint64_t>(i));
    manifest += std::to_string(i) + " " + stem + ".pgm " + std::to_string(r.seed) + " " + fmt(r.sigma_x, 6) + " " +
                fmt(r.sigma_z, 6) + "\n";
  }
  write_text(dir / "manifest.txt", manifest);
  std::cout << "simulated " << k << " realization(s) of " << echo.width() << "x" << echo.height() << "\n";
  return 0;
}

int cmd_degrade(const RunConfig& c, const fs::path& dir) {
  if (!c.has("input")) throw Error(ErrorCode::InvalidConfig, "degrade needs --input");
  BlurConfig blur;
  blur.blur_sigma_lo = c.real("blur_sigma_lo");
  blur.blur_sigma_hi = c.real("blur_sigma_hi");
  blur.alpha_lo = c.real("alpha_lo");
  blur.alpha_hi = c.real("alpha_hi");
  blur.seed = c.u64("seed");
  blur.validate();
  const Image out = degrade(load_display(c.str("input")), blur);
  write_image(out, dir / "degraded.pgm");
  std::cout << "degraded " << out.width() << "x" << out.height() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train / fuse / quantize / infer

std::vector<KeySpec> train_loop_keys(std::string lr) {
  return {{"epochs", "20", "passes over the corpus"},
          {"batch", "8", "patches per update"},
          {"patch", "64", "patch edge, >= 32 and divisible by 16"},
          {"k", "2", "realizations per despeckle source"},
          {"patches_per_source", "32", "patches per source per epoch"},
          {"lr", std::move(lr), "AdamW learning rate"},
          {"weight_decay", "0.01", "AdamW decoupled weight decay"},
          {"average_window", "50", "running-average window for model selection"},
          {"average_targets", "false", "despeckle target is the mean of the other realizations"},
          {"max_steps", "0", "step cap, 0 for none"}};
}

training::TrainConfig train_config(const RunConfig& c) {
  training::TrainConfig t;
  t.epochs = static_cast<int>(c.integer("epochs"));
  t.batch_size = static_cast<int>(c.integer("batch"));
  t.patch_size = static_cast<int>(c.integer("patch"));
  t.realizations_k = static_cast<int>(c.integer("k"));
  t.patches_per_source = static_cast<int>(c.integer("patches_per_source"));
  t.lr = c.real("lr");
  t.weight_decay = c.real("weight_decay");
  t.average_window = static_cast<int>(c.integer("average_window"));
  t.average_targets = c.flag("average_targets");
  t.max_steps = static_cast<std::size_t>(c.u64("max_steps"));
  t.seed = c.u64("seed");
  t.threads = static_cast<int>(c.integer("threads"));
  return t;
}

int cmd_train(const RunConfig& c, const fs::path& dir) {
  const net::Branch branch = net::parse_branch(c.str("branch"));
  if (branch == net::Branch::Fused) throw Error(ErrorCode::InvalidConfig, "train one branch at a time, then fuse");
  training::TrainConfig t = train_config(c);
  t.checkpoint_every = static_cast<int>(c.integer("checkpoint_every"));
  if (t.checkpoint_every > 0) {
    t.checkpoint_dir = dir / "checkpoints";
    fs::create_directories(t.checkpoint_dir);
  }
  t.validate();
  const training::Corpus corpus = load_corpus(c);
  const net::Model init = load_or_default(c, "model");

  training::TrainHooks hooks;
  hooks.on_step = [](const training::StepInfo& s, const net::Model&) {
    if ((s.step + 1) % 100 == 0)
      std::cerr << "step " << s.step + 1 << " loss " << fmt(s.loss, 6) << " avg " << fmt(s.running_average, 6) << "\n";
  };
  const auto result = branch == net::Branch::Despeckle ? training::train_despeckle(init, corpus, t, hooks)
                                                       : training::train_deblur(init, corpus, t, hooks);
  net::save(result.model, dir / "model.esnn");
  training::write_loss_csv(result.losses, dir / "loss.csv");
  write_text(dir / "summary.txt", "branch = " + std::string(net::to_string(branch)) +
                                      "\nsteps = " + std::to_string(result.losses.size()) +
                                      "\nbest_step = " + std::to_string(result.best_step) +
                                      "\nbest_average = " + fmt(result.best_average, 9) + "\n");
  std::cout << "trained " << net::to_string(branch) << ": " << result.losses.size() << " steps, best step "
            << result.best_step << " (avg loss " << fmt(result.best_average, 6) << ")\n";
  return 0;
}

int cmd_fuse(const RunConfig& c, const fs::path& dir) {
  if (!c.has("despeckle") || !c.has("deblur")) throw Error(ErrorCode::InvalidConfig, "fuse needs --despeckle and --deblur");
  const net::Model m = training::fuse(net::load(c.str("despeckle")), net::load(c.str("deblur")));
  net::save(m, dir / "model.esnn");
  std::cout << "fused model with " << net::param_count(m) << " parameters\n";
  return 0;
}

std::vector<Image> calibration_images(const RunConfig& c, const training::Corpus& corpus) {
  const auto count = static_cast<std::size_t>(c.integer("calib_count"));
  std::vector<Image> images;
  if (c.has("calib_dir")) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(c.str("calib_dir"))) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".esri")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (images.size() == count) break;
      images.push_back(load_display(f));
    }
  } else {
    for (const auto& s : corpus.deblur) {
      if (images.size() == count) break;
      images.push_back(s.image);
    }
  }
  return images;
}

int cmd_quantize(const RunConfig& c, const fs::path& dir) {
  if (!c.has("model")) throw Error(ErrorCode::InvalidConfig, "quantize needs --model");
  const net::Model model = net::load(c.str("model"));
  if (model.precision != net::Precision::Float32) throw Error(ErrorCode::InvalidConfig, "model is already quantized");
  const training::Corpus corpus = load_corpus(c);
  const std::vector<Image> calib = calibration_images(c, corpus);
  const int threads = static_cast<int>(c.integer("threads"));
  const quant::QuantParams params = quant::choose_quant_params(model, quant::calibrate(model, calib, threads));

  quant::QatConfig q;
  q.train = train_config(c);
  q.steps = static_cast<std::size_t>(c.u64("qat_steps"));
  q.eval_every = static_cast<std::size_t>(c.u64("eval_every"));
  q.validation_pairs = static_cast<int>(c.integer("validation_pairs"));
  net::Model tuned = model;
  std::string losses;
  if (q.steps > 0) {
    const quant::QatResult r = quant::qat_finetune(model, params, corpus, q);
    tuned = r.model;
    losses = "despeckle_loss_before = " + fmt(r.despeckle_loss_before, 9) +
             "\ndespeckle_loss_after = " + fmt(r.despeckle_loss_after, 9) +
             "\ndeblur_loss_before = " + fmt(r.deblur_loss_before, 9) +
             "\ndeblur_loss_after = " + fmt(r.deblur_loss_after, 9) + "\n";
  }
  const net::Model int8 = quant::quantize_model(tuned, params);
  net::save(int8, dir / "model.esnn");
  const std::size_t f32_bytes = net::weight_payload_bytes(model);
  const std::size_t i8_bytes = net::weight_payload_bytes(int8);
  write_text(dir / "report.txt", "calibration_images = " + std::to_string(calib.size()) +
                                     "\nf32_weight_bytes = " + std::to_string(f32_bytes) +
                                     "\nint8_weight_bytes = " + std::to_string(i8_bytes) + "\n" + losses);
  std::cout << "quantized with " << calib.size() << " calibration images; weight payload " << f32_bytes << " -> "
            << i8_bytes << " bytes\n";
  return 0;
}

Image run_precision(const net::Model& m, const Image& img, net::Branch branch, const std::string& precision) {
  if (precision == "int8") return quant::quantized_forward(m, img, branch);
  if (precision == "int8-weights") {
    if (m.precision != net::Precision::Int8Quantized)
      throw Error(ErrorCode::MissingQuantParams, "int8-weights needs a quantized checkpoint");
    return net::forward(m, img, branch);
  }
  if (precision == "f32") {
    if (m.precision != net::Precision::Float32)
      throw Error(ErrorCode::InvalidConfig, "checkpoint is quantized; use precision int8 or int8-weights");
    return net::forward(m, img, branch);
  }
  throw Error(ErrorCode::InvalidConfig, "precision must be f32, int8 or int8-weights, got '" + precision + "'");
}

int cmd_infer(const RunConfig& c, const fs::path& dir) {
  if (!c.has("model") || !c.has("input")) throw Error(ErrorCode::InvalidConfig, "infer needs --model and --input");
  const net::Model m = net::load(c.str("model"));
  const net::Branch branch = resolve_branch(c, m);
  const Image out = run_precision(m, load_display(c.str("input")), branch, c.str("precision"));
  write_image(out, dir / "output.pgm");
  std::cout << "inferred " << net::to_string(branch) << " (" << c.str("precision") << ") " << out.width() << "x"
            << out.height() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

const RoiSpec& require_roi(const std::vector<RoiSpec>& rois, const std::string& name) {
  const RoiSpec* r = find_roi(rois, name);
  if (!r) throw Error(ErrorCode::MissingRoi, "ROI '" + name + "' is not in the ROI file");
  return *r;
}

int cmd_eval(const RunConfig& c, const fs::path& dir) {
  if (!c.has("input") || !c.has("rois")) throw Error(ErrorCode::InvalidConfig, "eval needs --input and --rois");
  const Image input = load_display(c.str("input"));
  const std::vector<RoiSpec> rois = read_roi_file(c.str("rois"));
  const RoiSpec& bg = require_roi(rois, c.str("background_roi"));
  const RoiSpec& cyst = require_roi(rois, c.str("cyst_roi"));
  const RoiSpec& profile = require_roi(rois, c.str("profile_roi"));
  const RoiSpec& homogeneous = require_roi(rois, c.has("homogeneous_roi") ? c.str("homogeneous_roi") : bg.name);
  for (const auto& r : rois) r.validate(input);

  const std::string image_id = c.has("image_id") ? c.str("image_id") : fs::path(c.str("input")).stem().string();
  std::vector<metrics::MetricReport> rows;
  std::vector<std::pair<std::string, Image>> outputs;
  for (const auto& method : c.list("methods")) {
    metrics::MetricReport r;
    Image out;
    if (method == "input") {
      out = input;
    } else if (method == "lee") {
      out = baselines::lee_filter(input, {static_cast<int>(c.integer("lee_window")), std::nullopt, homogeneous});
    } else if (method == "srad") {
      baselines::SradConfig s;
      s.iterations = static_cast<int>(c.integer("srad_iterations"));
      s.dt = c.real("srad_dt");
      s.homogeneous_roi = homogeneous;
      out = baselines::srad_filter(input, s);
    } else if (method == "edgesrie-f32" || method == "edgesrie-int8") {
      const bool int8 = method == "edgesrie-int8";
      const std::string key = int8 ? "model_int8" : "model";
      if (!c.has(key)) throw Error(ErrorCode::InvalidConfig, "method " + method + " needs --" + (int8 ? "model-int8" : "model"));
      const net::Model m = net::load(c.str(key));
      const net::Branch branch = resolve_branch(c, m);
      out = run_precision(m, input, branch, int8 ? "int8" : "f32");
      r.params = net::param_count(m);
      r.mflops = static_cast<double>(net::flop_count(m, input.height(), input.width())) / 1e6;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown method '" + method + "'");
    }
    r.image_id = image_id;
    r.method = method;
    r.background_roi = bg.name;
    r.cyst_roi = cyst.name;
    r.profile_roi = profile.name;
    r.cnr = metrics::cnr(out, bg, cyst);
    r.ssnr = metrics::ssnr(out, homogeneous);
    r.enl = metrics::enl(out, homogeneous);
    const auto prof = metrics::extract_profile(out, profile);
    r.agm = metrics::agm(prof);
    r.ssim = metrics::ssim(out, input);
    rows.push_back(r);
    outputs.emplace_back(method, out);
  }

  const std::string table = metrics::render_table(rows);
  write_text(dir / "table.txt", table);
  write_text(dir / "metrics.csv", metrics::render_csv(rows));
  write_text(dir / "records.txt", metrics::render_records(rows));
  for (const auto& roi : rois) {
    if (roi.kind == RoiKind::Region) continue;
    std::vector<std::vector<double>> cols;
    std::string csv = "index";
    for (const auto& [method, img] : outputs) {
      csv += "," + method;
      cols.push_back(metrics::extract_profile(img, roi));
    }
    csv += "\n";
    for (std::size_t i = 0; !cols.empty() && i < cols[0].size(); ++i) {
      csv += std::to_string(i);
      for (const auto& col : cols) csv += "," + fmt(col[i], 3);
      csv += "\n";
    }
    write_text(dir / ("profile_" + roi.name + ".csv"), csv);
  }
  std::cout << "domain: display8\n" << table;
  return 0;
}

// ---------------------------------------------------------------------------
// profile

int cmd_profile(const RunConfig& c, const fs::path& dir) {
  const net::Model m = load_or_default(c, "model");
  const std::size_t params = net::param_count(m);
  std::ostringstream out;
  out << "params " << params << " (despeckle " << net::param_count(m.descriptor.despeckle) << ", deblur "
      << net::param_count(m.descriptor.deblur) << "), budget " << net::kParamBudget
      << (params <= net::kParamBudget ? " ok" : " exceeded") << "\n";
  std::string csv = "height,width,flops,despeckle_flops,deblur_flops\n";
  auto row = [&](int h, int w) {
    const auto total = net::flop_count(m, h, w);
    out << h << "x" << w << "  " << fmt(static_cast<double>(total) / 1e6, 2) << " MFLOPs\n";
    csv += std::to_string(h) + "," + std::to_string(w) + "," + std::to_string(total) + "," +
           std::to_string(net::flop_count(m.descriptor.despeckle, h, w)) + "," +
           std::to_string(net::flop_count(m.descriptor.deblur, h, w)) + "\n";
  };
  for (int s : c.int_list("sizes")) row(s, s);

  const double target = c.real("reference_mflops") * 1e6;
  int best = 16;
  for (int s = 16; s <= 4096; s += 16)
    if (std::abs(static_cast<double>(net::flop_count(m, s, s)) - target) <
        std::abs(static_cast<double>(net::flop_count(m, best, best)) - target))
      best = s;
  out << "reference size " << best << "x" << best << ": " << fmt(static_cast<double>(net::flop_count(m, best, best)) / 1e6, 2)
      << " MFLOPs (closest to " << fmt(target / 1e6, 2) << ")\n";
  write_text(dir / "profile.csv", csv);
  write_text(dir / "profile.txt", out.str());
  std::cout << out.str();
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchRow {
  std::string precision;
  std::string mode;
  int threads = 1;
  std::size_t runs = 0;
  double fps_mean = 0.0;
  double fps_std = 0.0;
  double ms_mean = 0.0;
  double layer_share = 0.0;
};

using Frame = std::function<void(net::LayerTimes*, net::LayerTimes*)>;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void fps_stats(const std::vector<double>& latencies, double scale, BenchRow& row) {
  std::vector<double> fps;
  for (double t : latencies) fps.push_back(scale / t);
  row.runs = fps.size();
  row.fps_mean = std::accumulate(fps.begin(), fps.end(), 0.0) / static_cast<double>(fps.size());
  double var = 0.0;
  for (double f : fps) var += (f - row.fps_mean) * (f - row.fps_mean);
  row.fps_std = fps.size() > 1 ? std::sqrt(var / static_cast<double>(fps.size() - 1)) : 0.0;
  row.ms_mean = 1e3 * std::accumulate(latencies.begin(), latencies.end(), 0.0) / static_cast<double>(latencies.size());
}

/// Timed frames on one thread with per-layer accounting.
BenchRow bench_single(const Frame& frame, double seconds, std::size_t min_runs, int warmup, net::LayerTimes& despeckle,
                      net::LayerTimes& deblur) {
  for (int i = 0; i < warmup; ++i) frame(nullptr, nullptr);
  std::vector<double> latencies;
  const auto start = std::chrono::steady_clock::now();
  while (latencies.size() < min_runs || seconds_since(start) < seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    frame(&despeckle, &deblur);
    latencies.push_back(seconds_since(t0));
  }
  BenchRow row;
  row.mode = "single";
  fps_stats(latencies, 1.0, row);
  const double layers = std::accumulate(despeckle.seconds.begin(), despeckle.seconds.end(), 0.0) +
                        std::accumulate(deblur.seconds.begin(), deblur.seconds.end(), 0.0);
  row.layer_share = layers / std::accumulate(latencies.begin(), latencies.end(), 0.0);
  return row;
}

/// Independent frames on `threads` workers; throughput is threads / latency.
BenchRow bench_multi(const Frame& frame, double seconds, std::size_t min_runs, int warmup, int threads) {
  std::vector<std::vector<double>> per(static_cast<std::size_t>(threads));
  const std::size_t share = (min_runs + static_cast<std::size_t>(threads) - 1) / static_cast<std::size_t>(threads);
  parallel_for(per.size(), threads, [&](std::size_t w) {
    for (int i = 0; i < warmup; ++i) frame(nullptr, nullptr);
    const auto start = std::chrono::steady_clock::now();
    while (per[w].size() < share || seconds_since(start) < seconds) {
      const auto t0 = std::chrono::steady_clock::now();
      frame(nullptr, nullptr);
      per[w].push_back(seconds_since(t0));
    }
  });
  std::vector<double> latencies;
  for (const auto& p : per) latencies.insert(latencies.end(), p.begin(), p.end());
  BenchRow row;
  row.mode = "multi";
  row.threads = threads;
  fps_stats(latencies, static_cast<double>(threads), row);
  return row;
}

int cmd_bench(const RunConfig& c, const fs::path& dir) {
  const double seconds = c.real("seconds");
  if (!(seconds > 0.0)) throw Error(ErrorCode::InvalidDuration, "--seconds must be positive");
  const auto min_runs = static_cast<std::size_t>(c.u64("min_runs"));
  const int warmup = static_cast<int>(c.integer("warmup"));
  const int threads = static_cast<int>(c.integer("threads"));

  Image img;
  if (c.has("input")) {
    img = load_display(c.str("input"));
  } else {
    const int size = static_cast<int>(c.integer("size"));
    SpeckleSimConfig sim;
    sim.seed = c.u64("seed");
    const PhantomSpec spec = size == 256 ? cyst2_phantom() : random_phantom(size, size, c.u64("seed"));
    img = to_display(simulate_bmode(make_phantom(spec), sim), -sim.floor_db);
  }
  const net::Model f32 = load_or_default(c, "model");
  if (f32.precision != net::Precision::Float32) throw Error(ErrorCode::InvalidConfig, "--model must be a float checkpoint");
  net::Model int8;
  std::string int8_source = c.str("model_int8");
  if (c.has("model_int8")) {
    int8 = net::load(c.str("model_int8"));
  } else {
    int8 = quant::quantize_model(f32, quant::choose_quant_params(f32, quant::calibrate(f32, std::span(&img, 1))));
    int8_source = "calibrated on the bench input";
  }
  const quant::IntegerProgram program = quant::IntegerProgram::compile(int8);

  std::map<std::string, Frame> frames;
  frames["f32"] = [&](net::LayerTimes* a, net::LayerTimes* b) {
    net::forward(f32, net::forward(f32, img, net::Branch::Despeckle, {true, a}), net::Branch::Deblur, {true, b});
  };
  frames["int8"] = [&](net::LayerTimes* a, net::LayerTimes* b) {
    program.run(program.run(img, net::Branch::Despeckle, a), net::Branch::Deblur, b);
  };
  std::vector<std::string> precisions = c.list("precision");
  if (precisions.size() == 1 && precisions[0] == "both") precisions = {"f32", "int8"};
  for (const auto& p : precisions)
    if (!frames.count(p)) throw Error(ErrorCode::InvalidConfig, "precision must be f32, int8 or both");

  std::vector<BenchRow> rows;
  std::string layers_csv = "precision,branch,layer,kind,ms_mean,share\n";
  std::ostringstream layer_text;
  for (const auto& p : precisions) {
    net::LayerTimes td, tb;
    BenchRow single = bench_single(frames[p], seconds, min_runs, warmup, td, tb);
    single.precision = p;
    rows.push_back(single);
    const double frame_total = single.ms_mean * static_cast<double>(single.runs);
    layer_text << p << " per-layer (ms per frame):\n";
    for (auto [branch, times] : {std::pair{net::Branch::Despeckle, &td}, std::pair{net::Branch::Deblur, &tb}}) {
      const auto& d = f32.descriptor_of(branch);
      for (std::size_t i = 0; i < times->seconds.size() && i < d.layers.size(); ++i) {
        const double ms = 1e3 * times->seconds[i] / static_cast<double>(single.runs);
        const double share = 1e3 * times->seconds[i] / frame_total;
        layers_csv += p + "," + std::string(net::to_string(branch)) + "," + std::to_string(i) + "," +
                      std::string(net::to_string(d.layers[i].kind)) + "," + fmt(ms, 4) + "," + fmt(share, 4) + "\n";
        if (ms >= 0.005)
          layer_text << "  " << net::to_string(branch) << "[" << i << "] " << net::to_string(d.layers[i].kind) << " "
                     << fmt(ms, 3) << " (" << fmt(100 * share, 1) << "%)\n";
      }
    }
    if (threads > 1) {
      BenchRow multi = bench_multi(frames[p], seconds, min_runs, warmup, threads);
      multi.precision = p;
      rows.push_back(multi);
    }
  }

  std::ostringstream out;
  out << "input " << img.width() << "x" << img.height() << ", " << fmt(static_cast<double>(net::flop_count(f32, img.height(), img.width())) / 1e6, 2)
      << " MFLOPs per frame, int8 model " << (int8_source.empty() ? "-" : int8_source) << "\n";
  std::string csv = "precision,mode,threads,runs,fps_mean,fps_std,ms_mean,layer_share\n";
  for (const auto& r : rows) {
    out << r.precision << " " << r.mode << " (" << r.threads << " thread" << (r.threads > 1 ? "s" : "") << "): "
        << fmt(r.fps_mean, 2) << " +- " << fmt(r.fps_std, 2) << " FPS over " << r.runs << " runs, " << fmt(r.ms_mean, 3)
        << " ms/frame";
    if (r.mode == "single") out << ", layers cover " << fmt(100 * r.layer_share, 1) << "%";
    out << "\n";
    csv += r.precision + "," + r.mode + "," + std::to_string(r.threads) + "," + std::to_string(r.runs) + "," +
           fmt(r.fps_mean, 4) + "," + fmt(r.fps_std, 4) + "," + fmt(r.ms_mean, 4) + "," + fmt(r.layer_share, 4) + "\n";
  }
  const auto find_single = [&](const std::string& p) {
    return std::find_if(rows.begin(), rows.end(), [&](const BenchRow& r) { return r.precision == p && r.mode == "single"; });
  };
  if (find_single("f32") != rows.end() && find_single("int8") != rows.end())
    out << "int8/f32 speedup " << fmt(find_single("int8")->fps_mean / find_single("f32")->fps_mean, 3) << "\n";
  out << layer_text.str();
  write_text(dir / "bench.csv", csv);
  write_text(dir / "layers.csv", layers_csv);
  write_text(dir / "bench.txt", out.str());
  std::cout << out.str();
  return 0;
}

// ---------------------------------------------------------------------------
// Dispatch

struct Command {
  std::string help;
  std::vector<KeySpec> keys;
  int (*run)(const RunConfig&, const fs::path&);
};

std::vector<KeySpec> with(std::vector<KeySpec> a, const std::vector<KeySpec>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::map<std::string, Command> commands() {
  std::map<std::string, Command> m;
  m["phantom"] = {"Write an echogenicity phantom and its ROIs",
                  {{"preset", "cyst2", "cyst2 or random"}, {"width", "256", "random preset width"}, {"height", "256", "random preset height"}},
                  cmd_phantom};
  m["simulate"] = {"Simulate B-mode speckle realizations of an echo map",
                   with({{"input", "", "echo map (.esri or .pgm); cyst2 phantom when empty"}, {"k", "1", "number of realizations"}},
                        sim_keys()),
                   cmd_simulate};
  m["degrade"] = {"Blur and contrast-narrow a display image",
                  {{"input", "", "display image"},
                   {"blur_sigma_lo", "0.5", "blur sigma lower bound"},
                   {"blur_sigma_hi", "2.0", "blur sigma upper bound"},
                   {"alpha_lo", "0.7", "histogram narrowing lower bound"},
                   {"alpha_hi", "1.0", "histogram narrowing upper bound"}},
                  cmd_degrade};
  m["train"] = {"Train the despeckle or deblur branch",
                with(with({{"branch", "despeckle", "despeckle or deblur"},
                           {"model", "", "starting checkpoint; fresh model from seed when empty"},
                           {"checkpoint_every", "0", "steps between snapshots, 0 for none"}},
                          corpus_keys()),
                     train_loop_keys("1e-4")),
                cmd_train};
  m["fuse"] = {"Combine a despeckle and a deblur checkpoint",
               {{"despeckle", "", "checkpoint supplying the despeckle branch"},
                {"deblur", "", "checkpoint supplying the deblur branch"}},
               cmd_fuse};
  m["quantize"] = {"Calibrate, fine-tune with fake quantization and export int8",
                   with(with({{"model", "", "float checkpoint"},
                              {"calib_dir", "", "directory of calibration images; corpus images when empty"},
                              {"calib_count", "16", "calibration images to use"},
                              {"qat_steps", "200", "fine-tuning steps per branch"},
                              {"eval_every", "25", "steps between integer-path evaluations"},
                              {"validation_pairs", "8", "held-out pairs per branch"}},
                             corpus_keys()),
                        train_loop_keys("1e-5")),
                   cmd_quantize};
  m["infer"] = {"Run a checkpoint on one image",
                {{"model", "", "checkpoint"},
                 {"input", "", "input image"},
                 {"precision", "f32", "f32, int8 or int8-weights"},
                 {"branch", "auto", "auto, despeckle, deblur or fused"}},
                cmd_infer};
  m["eval"] = {"Score methods on an image over named ROIs",
               {{"input", "", "display image"},
                {"rois", "", "ROI file"},
                {"methods", "input,lee,srad", "comma list of input, lee, srad, edgesrie-f32, edgesrie-int8"},
                {"model", "", "float checkpoint for edgesrie-f32"},
                {"model_int8", "", "quantized checkpoint for edgesrie-int8"},
                {"branch", "auto", "network branch to evaluate"},
                {"background_roi", "background", "background region"},
                {"cyst_roi", "cyst", "lesion region"},
                {"profile_roi", "lateral", "profile for AGM"},
                {"homogeneous_roi", "", "region for SSNR, ENL and filter noise estimates; background when empty"},
                {"image_id", "", "row label; input file stem when empty"},
                {"lee_window", "7", "Lee window edge"},
                {"srad_iterations", "50", "SRAD iterations"},
                {"srad_dt", "0.05", "SRAD time step"}},
               cmd_eval};
  m["profile"] = {"Report parameter and FLOP counts",
                  {{"model", "", "checkpoint; default model when empty"},
                   {"sizes", "64,128,256,512", "square input sizes"},
                   {"reference_mflops", "564.14", "FLOP target for the reference size search"}},
                  cmd_profile};
  m["bench"] = {"Time f32 and int8 inference",
                {{"model", "", "float checkpoint; default model when empty"},
                 {"model_int8", "", "quantized checkpoint; calibrated from the float model when empty"},
                 {"input", "", "display image; simulated phantom when empty"},
                 {"size", "256", "simulated input edge"},
                 {"seconds", "2", "minimum timed duration per configuration"},
                 {"min_runs", "100", "minimum timed frames per configuration"},
                 {"warmup", "3", "untimed frames per configuration"},
                 {"precision", "both", "f32, int8 or both"}},
                cmd_bench};
  for (auto& [name, cmd] : m) {
    cmd.keys.push_back({"seed", "1", "random seed"});
    cmd.keys.push_back({"threads", "1", "worker threads"});
    cmd.keys.push_back({"out_dir", "runs", "output root"});
  }
  return m;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Numeric: return 4;
  }
  return 3;
}

int usage(const std::map<std::string, Command>& cmds, std::ostream& os) {
  os << "usage: esrie <command> [--config FILE] [--key value ...]\n\ncommands:\n";
  for (const auto& [name, cmd] : cmds) os << "  " << name << std::string(10 - name.size(), ' ') << cmd.help << "\n";
  os << "\nesrie <command> --help lists the keys of a command.\n";
  return 2;
}

int run(int argc, char** argv) {
  const auto cmds = commands();
  if (argc < 2) return usage(cmds, std::cerr);
  const std::string name = argv[1];
  if (name == "-h" || name == "--help") {
    usage(cmds, std::cout);
    return 0;
  }
  const auto it = cmds.find(name);
  if (it == cmds.end()) {
    std::cerr << "esrie: unknown command '" << name << "'\n";
    return usage(cmds, std::cerr);
  }
  const Command& cmd = it->second;

  CLI::App app{cmd.help, "esrie " + name};
  std::string config_file;
  app.add_option("--config", config_file, "key = value file; command-line keys override it");
  std::vector<std::pair<std::string, CLI::Option*>> given;
  std::map<std::string, std::string> values;
  for (const auto& k : cmd.keys) {
    std::string names = "--" + k.name;
    if (k.name.find('_') != std::string::npos) {
      std::string dashed = k.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      names += ",--" + dashed;
    }
    given.emplace_back(k.name, app.add_option(names, values[k.name], k.help + " [" + k.fallback + "]"));
  }
  std::string positional_branch;
  CLI::Option* branch_pos = name == "train" ? app.add_option("branch_name", positional_branch, "despeckle or deblur") : nullptr;

  try {
    app.parse(argc - 1, argv + 1);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "esrie " << name << ": "
              << (dynamic_cast<const CLI::ExtrasError*>(&e) ? "UnknownKey: " : "InvalidConfig: ") << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig config(name, cmd.keys);
    if (!config_file.empty()) config.merge_file(config_file);
    for (const auto& [key, opt] : given)
      if (opt->count() > 0) config.set(key, values[key]);
    if (branch_pos && branch_pos->count() > 0) config.set("branch", positional_branch);
    if (config.integer("threads") < 1) throw Error(ErrorCode::InvalidConfig, "threads must be at least 1");

    const fs::path dir = config.run_dir();
    fs::create_directories(dir);
    write_text(dir / "config.txt", config.render());
    const int rc = cmd.run(config, dir);
    std::cout << "run dir: " << dir.string() << "\n";
    return rc;
  } catch (const Error& e) {
    std::cerr << "esrie " << name << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "esrie " << name << ": IoError: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "esrie: " << e.what() << "\n";
    return 3;
  }
}
