#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "esrie/error.hpp"
#include "esrie/image_io.hpp"
#include "esrie/metrics.hpp"
#include "esrie/phantom.hpp"
#include "esrie/training.hpp"

using namespace esrie;
using namespace esrie::training;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an esrie::Error");
  return ErrorCode::InvalidConfig;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "esrie_test_training" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.patch_size = 32;
  cfg.patches_per_source = 4;
  cfg.average_window = 5;
  return cfg;
}

bool same_params(const net::BranchParams<float>& a, const net::BranchParams<float>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weight.storage() != b.layers[i].weight.storage() || a.layers[i].bias != b.layers[i].bias) return false;
  return true;
}

double pair_loss(const net::Model& m, net::Branch b, const ImagePair& p) {
  const Image out = net::forward(m, p.input, b);
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = (out.data()[i] - p.target.data()[i]) / 255.0;
    s += d * d;
  }
  return s / static_cast<double>(out.size());
}

const Corpus& shared_corpus() {
  static const Corpus c = synthetic_corpus(4, 64, 11);
  return c;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.patch_size = 40;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidConfig);
  cfg = {};
  cfg.realizations_k = 1;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidConfig);
  cfg = {};
  cfg.batch_size = 0;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidConfig);
  cfg = {};
  CHECK(steps_per_epoch(32, cfg) == 128);
  cfg.batch_size = 5;
  CHECK(steps_per_epoch(3, cfg) == 20);
  cfg.patches_per_source = 3;
  CHECK(steps_per_epoch(3, cfg) == 2);
}

TEST_CASE("synthetic corpus layout") {
  const Corpus& c = shared_corpus();
  REQUIRE(c.despeckle.size() == 4);
  REQUIRE(c.deblur.size() == 4);
  CHECK(c.despeckle[0].echo.domain() == Domain::LinearAmplitude);
  CHECK(c.deblur[0].image.domain() == Domain::Display8);
  CHECK(c.deblur[0].image.width() == 64);
  const Corpus again = synthetic_corpus(4, 64, 11);
  CHECK(std::equal(again.deblur[3].image.data().begin(), again.deblur[3].image.data().end(),
                   c.deblur[3].image.data().begin()));
  CHECK(code_of([] { synthetic_corpus(0, 64, 1); }) == ErrorCode::EmptyCorpus);
}

TEST_CASE("despeckle pairs differ, are deterministic and shaped") {
  const Corpus& c = shared_corpus();
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    Rng before = rng;
    const ImagePair p = make_despeckle_pair(c.despeckle[i % 4].echo, c.despeckle[i % 4].sim, 2, 32, rng);
    CHECK(p.input.width() == 32);
    CHECK(p.input.height() == 32);
    CHECK(p.input.domain() == Domain::Display8);
    CHECK(p.target.domain() == Domain::Display8);
    CHECK(!std::equal(p.input.data().begin(), p.input.data().end(), p.target.data().begin()));
    if (i < 3) {
      const ImagePair q = make_despeckle_pair(c.despeckle[i % 4].echo, c.despeckle[i % 4].sim, 2, 32, before);
      CHECK(std::equal(p.input.data().begin(), p.input.data().end(), q.input.data().begin()));
      CHECK(std::equal(p.target.data().begin(), p.target.data().end(), q.target.data().begin()));
    }
  }
}

TEST_CASE("k=2 pairs are the two realizations in random order") {
  // Oracle: rebuild both realizations from the pair's seed draw and match.
  const Corpus& c = shared_corpus();
  const Image& echo = c.despeckle[0].echo;
  int swapped = 0;
  const int draws = 40;
  for (int i = 0; i < draws; ++i) {
    Rng a(derive_seed(77, static_cast<std::uint64_t>(i)));
    const ImagePair p = make_despeckle_pair(echo, c.despeckle[0].sim, 2, 64, a);
    Rng b(derive_seed(77, static_cast<std::uint64_t>(i)));
    SpeckleSimConfig sim = c.despeckle[0].sim;
    sim.seed = b.next_u64();
    const auto reals = make_realizations(echo, sim, 2, 1);
    const Image r0 = to_display(reals[0], -sim.floor_db);
    const Image r1 = to_display(reals[1], -sim.floor_db);
    const bool in0 = std::equal(p.input.data().begin(), p.input.data().end(), r0.data().begin());
    const bool in1 = std::equal(p.input.data().begin(), p.input.data().end(), r1.data().begin());
    REQUIRE(in0 != in1);
    const Image& other = in0 ? r1 : r0;
    CHECK(std::equal(p.target.data().begin(), p.target.data().end(), other.data().begin()));
    swapped += in1;
  }
  CHECK(swapped > 5);
  CHECK(swapped < draws - 5);
}

TEST_CASE("deblur pairs degrade the target patch") {
  const Corpus& c = shared_corpus();
  Rng rng(9);
  const ImagePair p = make_deblur_pair(c.deblur[1].image, c.deblur[1].blur, 32, rng);
  CHECK(p.input.width() == 32);
  CHECK(!std::equal(p.input.data().begin(), p.input.data().end(), p.target.data().begin()));
  std::vector<double> prof_in, prof_out;
  for (int x = 0; x < 32; ++x) prof_in.push_back(p.input.at(x, 16)), prof_out.push_back(p.target.at(x, 16));
  CHECK(metrics::agm(prof_in) < metrics::agm(prof_out));
}

TEST_CASE("zero-epoch run returns the initial model") {
  const net::Model m = net::build_default(1);
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  const TrainResult r = train_despeckle(m, shared_corpus(), cfg);
  CHECK(r.losses.empty());
  CHECK(r.best_step == 0);
  CHECK(same_params(r.model.despeckle, m.despeckle));
}

TEST_CASE("training is deterministic and independent of thread count") {
  const net::Model m = net::build_default(1);
  TrainConfig cfg = small_config();
  cfg.max_steps = 4;
  const TrainResult a = train_despeckle(m, shared_corpus(), cfg);
  const TrainResult b = train_despeckle(m, shared_corpus(), cfg);
  cfg.threads = 2;
  const TrainResult c = train_despeckle(m, shared_corpus(), cfg);
  CHECK(a.losses.size() == 4);
  CHECK(a.losses == b.losses);
  CHECK(a.losses == c.losses);
  CHECK(same_params(a.model.despeckle, b.model.despeckle));
  CHECK(same_params(a.model.despeckle, c.model.despeckle));
  CHECK(same_params(a.model.deblur, m.deblur));
  CHECK(net::encode_model(a.model) == net::encode_model(c.model));
}

TEST_CASE("best model is the snapshot closing the lowest full window") {
  const net::Model m = net::build_default(2);
  TrainConfig cfg = small_config();
  cfg.max_steps = 8;
  cfg.average_window = 3;
  std::vector<net::Model> snaps;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo&, const net::Model& cur) { snaps.push_back(cur); };
  const TrainResult r = train_despeckle(m, shared_corpus(), cfg, hooks);
  REQUIRE(snaps.size() == 8);
  std::size_t best = 0;
  double best_avg = std::numeric_limits<double>::infinity();
  for (std::size_t end = 3; end <= 8; ++end) {
    const double avg = (r.losses[end - 1] + r.losses[end - 2] + r.losses[end - 3]) / 3.0;
    if (avg < best_avg) best_avg = avg, best = end;
  }
  CHECK(r.best_step == best);
  CHECK(r.best_average == doctest::Approx(best_avg).epsilon(1e-12));
  CHECK(same_params(r.model.despeckle, snaps[best - 1].despeckle));
}

TEST_CASE("despeckle loss on a frozen validation pair drops by 30 percent") {
  const net::Model m = net::build_default(1);
  TrainConfig cfg = small_config();
  cfg.batch_size = 4;
  cfg.max_steps = 40;
  cfg.epochs = 100;
  Rng vr(12345);
  const ImagePair val = make_despeckle_pair(shared_corpus().despeckle[2].echo, shared_corpus().despeckle[2].sim, 2, 32, vr);
  const TrainResult r = train_despeckle(m, shared_corpus(), cfg);
  CHECK(pair_loss(r.model, net::Branch::Despeckle, val) <= 0.7 * pair_loss(m, net::Branch::Despeckle, val));
}

TEST_CASE("deblur training lowers the loss") {
  const net::Model m = net::build_default(1);
  TrainConfig cfg = small_config();
  cfg.batch_size = 4;
  cfg.max_steps = 30;
  cfg.epochs = 100;
  Rng vr(4242);
  const ImagePair val = make_deblur_pair(shared_corpus().deblur[0].image, shared_corpus().deblur[0].blur, 32, vr);
  const TrainResult r = train_deblur(m, shared_corpus(), cfg);
  CHECK(same_params(r.model.despeckle, m.despeckle));
  CHECK(pair_loss(r.model, net::Branch::Deblur, val) < pair_loss(m, net::Branch::Deblur, val));
}

TEST_CASE("non-finite loss aborts with the step") {
  const net::Model m = net::build_default(1);
  TrainConfig cfg = small_config();
  PairSampler bad = [](Rng&) {
    TensorPair p{nn::Tensor4(1, 1, 32, 32, 0.5f), nn::Tensor4(1, 1, 32, 32, std::nanf(""))};
    return p;
  };
  try {
    train_branch(m, net::Branch::Despeckle, bad, 3, cfg);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK(code_of([&] { train_despeckle(m, Corpus{}, cfg); }) == ErrorCode::EmptyCorpus);
  CHECK(code_of([&] { train_deblur(m, Corpus{}, cfg); }) == ErrorCode::EmptyCorpus);
}

TEST_CASE("fuse combines branches verbatim") {
  const net::Model a = net::build_default(1);
  const net::Model b = net::build_default(2);
  const net::Model f = fuse(a, b);
  CHECK(f.fused);
  CHECK(same_params(f.despeckle, a.despeckle));
  CHECK(same_params(f.deblur, b.deblur));
  CHECK(net::param_count(f) == a.despeckle.param_count() + b.deblur.param_count());

  Image img(32, 32, Domain::Display8);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = static_cast<float>((i * 13) % 256);
  const Image fused = net::forward(f, img, net::Branch::Fused);
  const Image composed = net::forward(b, net::forward(a, img, net::Branch::Despeckle), net::Branch::Deblur);
  CHECK(std::equal(fused.data().begin(), fused.data().end(), composed.data().begin()));

  const fs::path dir = temp_dir("fuse");
  net::save(f, dir / "fused.esnn");
  CHECK(net::encode_model(net::load(dir / "fused.esnn")) == net::encode_model(f));

  net::Model other = b;
  other.descriptor.deblur.layers.pop_back();
  CHECK(code_of([&] { fuse(a, other); }) == ErrorCode::DescriptorMismatch);
}

TEST_CASE("manifest round-trip and loading") {
  const fs::path dir = temp_dir("manifest");
  const fs::path manifest = write_synthetic_corpus(dir, 2, 64, 5);
  const CorpusManifest parsed = read_manifest(manifest);
  REQUIRE(parsed.entries.size() == 4);
  const Corpus loaded = load_corpus(parsed);
  CHECK(loaded.despeckle.size() == 2);
  CHECK(loaded.deblur.size() == 2);

  const CorpusManifest m = parse_manifest("# c\ndespeckle_source\ta.esri\tsigma_x=1.5\tcycles=3\n\ndeblur_source\tb.pgm\n", dir);
  REQUIRE(m.entries.size() == 2);
  CHECK(m.entries[0].path == dir / "a.esri");
  CHECK(m.entries[0].overrides.at("cycles") == "3");
  CHECK(m.entries[1].role == CorpusRole::DeblurSource);
  write_manifest(m, dir / "copy.tsv");
  const CorpusManifest back = read_manifest(dir / "copy.tsv");
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].overrides == m.entries[0].overrides);

  CHECK(code_of([&] { parse_manifest("teacher\tx.pgm\n", dir); }) == ErrorCode::InvalidConfig);
  CorpusManifest unknown = parse_manifest("deblur_source\t" + parsed.entries[1].path.string() + "\tcolour=red\n", dir);
  CHECK(code_of([&] { load_corpus(unknown); }) == ErrorCode::UnknownKey);
  CHECK(code_of([&] { load_corpus(parse_manifest("deblur_source\tmissing.pgm\n", dir)); }) == ErrorCode::IoError);
}

TEST_CASE("loss csv") {
  const fs::path dir = temp_dir("csv");
  write_loss_csv({0.5, 0.25}, dir / "loss.csv");
  std::ifstream in(dir / "loss.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text == "step,loss\n0,0.5\n1,0.25\n");
}
