// Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/shapes.hpp"
#include "visualsplit/bundle_io.hpp"
#include "visualsplit/evaluation.hpp"

using namespace vsplit;
using vsplit::testing::check_gradient;
using vsplit::testing::fresh_dir;
using vsplit::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

RGBImage<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  return RGBImage<double>(random_tensor({h, w, 3}, seed, 0.02, 0.98));
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ------------------------------------------------------------------ overfit run

/// Smooth colour waves over a blue checkerboard, one variant per index.
RGBImage<float> pattern_image(std::size_t size, int i) {
  RGBImage<float> img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const float fx = float(x) / float(size), fy = float(y) / float(size);
      img.at(y, x, 0) = 0.5f + 0.4f * std::sin(6 * fx + float(i));
      img.at(y, x, 1) = 0.5f + 0.4f * std::cos(5 * fy + 2 * float(i));
      img.at(y, x, 2) = ((x / 8 + y / 8 + std::size_t(i)) % 2) ? 0.8f : 0.2f;
    }
  return img;
}

constexpr std::size_t kOverfitSize = 64;
constexpr std::size_t kOverfitImages = 4;
constexpr std::size_t kOverfitSteps = 2000;

struct OverfitRun {
  Batch<float> data;
  std::unique_ptr<Trainer<float>> trainer;
  std::vector<double> totals;  // total loss per step
  double seconds = 0;
};

TrainConfig overfit_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.image_size = kOverfitSize;
  c.batch_size = kOverfitImages;
  c.total_steps = kOverfitSteps;
  c.warmup_steps = kOverfitSteps / 20;
  c.base_lr = 1e-3;
  c.model = ModelConfig::small();
  c.descriptor.num_bins = static_cast<int>(c.model.encoder.hist_bins);
  // photometric jitter teaches the histogram to carry lightness and the centroids colour
  c.augment.brightness = 30;
  c.augment.hue_degrees = 30;
  c.augment.probability = 0.8;
  return c;
}

/// Trained once, shared by the overfit and input-independence criteria.
OverfitRun& overfit_run(std::uint64_t seed = 0) {
  static std::map<std::uint64_t, std::unique_ptr<OverfitRun>> runs;
  auto& slot = runs[seed];
  if (slot) return *slot;
  auto r = std::make_unique<OverfitRun>();
  const auto c = overfit_config(seed);
  for (std::size_t i = 0; i < kOverfitImages; ++i) {
    auto img = pattern_image(kOverfitSize, int(i));
    r->data.bundles.push_back(extract_bundle(img, c.descriptor));
    r->data.images.push_back(std::move(img));
  }
  r->trainer = std::make_unique<Trainer<float>>(c);
  const auto t0 = Clock::now();
  r->trainer->run(r->data, c.total_steps, [&](const StepRecord& s) {
    r->totals.push_back(s.loss.total);
    if (s.step % 250 == 0) {
      std::printf("  overfit seed %llu step %zu total %.4f pixel %.5f\n", static_cast<unsigned long long>(seed), s.step,
                  s.loss.total, s.loss.pixel);
    }
  });
  r->seconds = seconds_since(t0);
  slot = std::move(r);
  return *slot;
}

// ------------------------------------------------------------------ reporting

const std::map<std::string, std::string> kCriteria = {
    {"C1_OperatorGradients", "criterion 1: operator gradients match finite differences"},
    {"C2_DescriptorInvariants", "criterion 2: descriptor invariants"},
    {"C3_LossOracle", "criterion 3: descriptor-consistency loss oracle"},
    {"C4_AdaLNZeroIdentity", "criterion 4: conditioned blocks are identity at init"},
    {"C5_OverfitReconstruction", "criterion 5: overfit reconstruction PSNR >= 25 dB"},
    {"C6_InputIndependence", "criterion 6: input independence (brightness and colour edits)"},
    {"C7_RepresentationProbe", "criterion 7: pretrained encoder beats random by >= 10 points"},
    {"C8_DeterminismAndPersistence", "criterion 8: resume determinism and byte-exact bundles"},
    {"C9_ClusterSweep", "criterion 9: cluster sweep emits CSV"},
};

class CriterionPrinter : public ::testing::EmptyTestEventListener {
 public:
  void OnTestEnd(const ::testing::TestInfo& info) override {
    const auto it = kCriteria.find(info.name());
    if (it == kCriteria.end()) return;
    const bool ok = info.result()->Passed();
    lines_.push_back(std::string(ok ? "PASS" : "FAIL") + "  " + it->second);
    std::printf("%s\n", lines_.back().c_str());
  }
  void OnTestProgramEnd(const ::testing::UnitTest&) override {
    std::printf("\n==== acceptance summary ====\n");
    for (const auto& l : lines_) std::printf("%s\n", l.c_str());
  }

 private:
  std::vector<std::string> lines_;
};

}  // namespace

// ------------------------------------------------------------------ 1

TEST(Acceptance, C1_OperatorGradients) {
  const auto t0 = Clock::now();
  ExtractionConfig cfg;
  cfg.clusters = 4;
  cfg.num_bins = 20;
  cfg.bandwidth = 5;
  for (std::uint64_t seed : {101, 102, 103}) {
    cfg.seed = seed;
    const auto x0 = random_tensor({8, 8, 3}, seed, 0.02, 0.98);
    const std::vector<std::pair<std::string, std::function<ad::Var<double>(const ad::Var<double>&)>>> ops = {
        {"rgb_to_lab", [](auto& x) { return ad::rgb_to_lab(x); }},
        {"extract_edges", [&](auto& x) { return extract_descriptor_vars(x, cfg).edges; }},
        {"extract_histogram", [&](auto& x) { return extract_descriptor_vars(x, cfg).histogram; }},
        {"extract_colour_segments",
         [&](auto& x) {
           auto v = extract_descriptor_vars(x, cfg);
           return ad::concat<double>({v.assignments, v.centroids});
         }},
        {"render_segmentation", [&](auto& x) { return extract_descriptor_vars(x, cfg).ab_render; }},
    };
    for (const auto& [name, f] : ops) {
      const auto r = check_gradient(f, x0, seed + 7);
      std::printf("  seed %llu %-24s relative error %.3e\n", (unsigned long long)seed, name.c_str(), r.relative_error);
      EXPECT_LT(r.relative_error, 1e-4) << name;
      EXPECT_GT(r.numeric_norm, 0.0) << name;
    }

    // the loss path, through re-extraction from the reconstruction
    const auto target = random_image(8, 8, seed + 50);
    const auto bundle = extract_bundle(target, cfg);
    const auto t = ad::constant(target.pixels.reshaped({1, 8, 8, 3}));
    for (const auto& [name, w] : std::vector<std::pair<std::string, std::array<double, 3>>>{
             {"L_e", {1, 0, 0}}, {"L_g", {0, 1, 0}}, {"L_c", {0, 0, 1}}, {"L_e+L_g+L_c", {1, 1, 1}}}) {
      LossConfig lc;
      lc.w_pixel = lc.w_perceptual = 0;
      lc.perceptual_mode = PerceptualMode::off;
      lc.w_edge = w[0];
      lc.w_hist = w[1];
      lc.w_colour = w[2];
      const auto r = check_gradient(
          [&](const ad::Var<double>& x) { return compute_losses<double>(x, t, {bundle}, lc, nullptr).total; },
          random_tensor({1, 8, 8, 3}, seed + 60, 0.1, 0.9), seed + 8);
      std::printf("  seed %llu %-24s relative error %.3e\n", (unsigned long long)seed, name.c_str(), r.relative_error);
      EXPECT_LT(r.relative_error, 1e-3) << name;
      EXPECT_GT(r.numeric_norm, 0.0) << name;
    }
  }
  const double s = seconds_since(t0);
  std::printf("  runtime %.1f s\n", s);
  EXPECT_LT(s, 120.0);
}

// ------------------------------------------------------------------ 2

TEST(Acceptance, C2_DescriptorInvariants) {
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto img = random_image(12, 16, 300 + seed);
    ExtractionConfig cfg;
    cfg.seed = seed;
    const auto b = extract_bundle(img, cfg);

    double hist_sum = 0;
    for (double v : b.histogram.weights.values()) {
      EXPECT_GE(v, 0.0);
      hist_sum += v;
    }
    EXPECT_NEAR(hist_sum, 1.0, 1e-9);

    const auto k = b.segmentation.clusters();
    for (std::size_t p = 0; p < 12 * 16; ++p) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += b.segmentation.assignments[p * k + j];
      ASSERT_NEAR(s, 1.0, 1e-9);
    }

    const auto trace = soft_kmeans_energy_trace(rgb_to_lab(img), cfg);
    ASSERT_EQ(trace.size(), std::size_t(cfg.iterations));
    for (std::size_t t = 1; t < trace.size(); ++t) EXPECT_LE(trace[t], trace[t - 1] + 1e-9 * std::abs(trace[t - 1]));

    EXPECT_EQ(extract_bundle(img, cfg), b);
    EXPECT_EQ(bundle_bytes(extract_bundle(img, cfg)), bundle_bytes(b));
  }
  for (double grey : {0.0, 0.3, 1.0}) {
    RGBImage<double> flat(9, 11);
    for (auto& v : flat.pixels.values()) v = grey;
    // zero Sobel response leaves only the sqrt(delta) smoothing floor
    const auto edges = extract_edges(rgb_to_lab(flat));
    for (double v : edges.magnitude.values()) EXPECT_NEAR(v * edges.normalization, std::sqrt(kEdgeDelta), 1e-15);
  }
  const double s = seconds_since(t0);
  std::printf("  runtime %.1f s\n", s);
  EXPECT_LT(s, 60.0);
}

// ------------------------------------------------------------------ 3

TEST(Acceptance, C3_LossOracle) {
  {
    ad::NoGradGuard guard;
    const auto d = ad::constant(Tensor<double>({2}, {1.0, 0.0}));
    const auto dhat = ad::constant(Tensor<double>({2}, {0.0, 1.0}));
    const double value = ad::chi_square_distance(d, dhat, 1e-6).item();
    std::printf("  L_g two-bin toy %.12f\n", value);
    EXPECT_NEAR(value, 0.999999, 1e-9);
  }

  ExtractionConfig ex;
  ex.clusters = 3;
  ex.num_bins = 20;
  ex.bandwidth = 5;
  LossConfig lc;
  lc.perceptual_mode = PerceptualMode::off;
  for (std::uint64_t seed : {21, 22}) {
    const auto img = random_image(8, 8, seed);
    const auto bundle = extract_bundle(img, ex);
    for (double offset : {0.05, 0.1, 0.25}) {
      auto shifted = bundle;
      for (auto& v : shifted.edges.magnitude.values()) v -= offset;
      for (auto& v : shifted.segmentation.centroids.values()) v -= offset * kAbScale;
      const auto d = descriptor_consistency_loss(img, shifted, lc);
      EXPECT_NEAR(d.edge, offset, 1e-9);
      EXPECT_NEAR(d.colour, offset, 1e-9);
    }
    const auto perfect = descriptor_consistency_loss(img, bundle, lc);
    std::printf("  perfect reconstruction L_e %.2e L_g %.2e L_c %.2e\n", perfect.edge, perfect.hist, perfect.colour);
    EXPECT_LT(perfect.edge, 1e-6);
    EXPECT_LT(perfect.hist, 1e-6);
    EXPECT_LT(perfect.colour, 1e-6);
  }
}

// ------------------------------------------------------------------ 4

TEST(Acceptance, C4_AdaLNZeroIdentity) {
  const auto cfg = ModelConfig::small().encoder;
  nn::ParamStore<double> store;
  std::mt19937_64 rng(4);
  ConditionedEncoder<double> enc(store, cfg, rng);
  ad::NoGradGuard guard;
  const std::size_t batch = 2, seq = 17;
  auto hist = random_tensor({batch, cfg.hist_bins}, 5, 0.1, 1.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0;
    for (std::size_t i = 0; i < cfg.hist_bins; ++i) s += hist[b * cfg.hist_bins + i];
    for (std::size_t i = 0; i < cfg.hist_bins; ++i) hist[b * cfg.hist_bins + i] /= s;
  }
  const auto cond = enc.conditioning(ad::constant(hist));
  const auto x0 = random_tensor({batch * seq, cfg.embed_dim}, 6, -3, 3);
  ASSERT_FALSE(enc.adaln_blocks().empty());
  double worst = 0;
  auto x = ad::constant(x0);
  for (const auto& blk : enc.adaln_blocks()) {
    const auto y = blk(x, cond, batch);
    worst = std::max(worst, max_abs_diff(y.value(), x.value()));
    x = y;
  }
  std::printf("  %zu blocks, worst L-inf change %.3e\n", enc.adaln_blocks().size(), worst);
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(max_abs_diff(x.value(), x0), 1e-6);
}

// ------------------------------------------------------------------ 5

TEST(Acceptance, C5_OverfitReconstruction) {
  auto& run = overfit_run();
  EXPECT_LE(run.trainer->step(), 2000u);
  const auto recon = run.trainer->model().reconstruct(run.data.bundles);
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < recon.size(); ++i) {
    const double p = psnr(recon[i], run.data.images[i]);
    std::printf("  image %zu PSNR %.2f dB SSIM %.4f\n", i, p, ssim(recon[i], run.data.images[i]));
    worst = std::min(worst, p);
    EXPECT_GE(p, 25.0) << "image " << i;
  }
  std::printf("  %zu steps in %.0f s, worst PSNR %.2f dB\n", run.trainer->step(), run.seconds, worst);
  EXPECT_LT(run.seconds, 30 * 60.0);
}

TEST(TrainingExample, TotalLossFallsBelowFifthWithin200Steps) {
  auto& run = overfit_run();
  ASSERT_GE(run.totals.size(), 200u);
  std::printf("  step 1 total %.4f, step 200 total %.4f\n", run.totals[0], run.totals[199]);
  EXPECT_LT(run.totals[199], 0.2 * run.totals[0]);
}

// ------------------------------------------------------------------ 6

TEST(Acceptance, C6_InputIndependence) {
  auto& run = overfit_run(0);
  const auto& model = run.trainer->model();
  const auto& independent = overfit_run(1).trainer->model();
  for (std::size_t i = 0; i < run.data.size(); ++i) {
    const auto& bundle = run.data.bundles[i];
    const auto r = input_independence_report(model, independent, bundle, {-20.0, 0.0, 20.0});
    std::printf("  image %zu mean L", i);
    for (const auto& v : r.variants) std::printf(" %+.0f:%.2f", v.delta_L, v.mean_L);
    std::printf("  edge distance %.4f vs noise floor %.4f\n", r.max_edge_distance(), r.noise_floor);
    EXPECT_TRUE(r.monotone(0.5, 1)) << "image " << i << " inversions " << r.inversions;
    EXPECT_LE(r.max_edge_distance(), 3.0 * r.noise_floor) << "image " << i;

    // recolour the cluster owning the most pixels to the far side of the ab plane
    const auto labels = argmax_labels(bundle.segmentation);
    std::vector<std::size_t> owned(bundle.segmentation.clusters(), 0);
    for (int l : labels) ++owned[std::size_t(l)];
    const int cluster = int(std::max_element(owned.begin(), owned.end()) - owned.begin());
    const double a = bundle.segmentation.centroids.at(std::size_t(cluster), 0);
    const double b = bundle.segmentation.centroids.at(std::size_t(cluster), 1);
    const auto c = colour_edit_report(model, bundle, cluster, {a > 0 ? a - 40 : a + 40, b > 0 ? b - 40 : b + 40});
    std::printf("  image %zu recolour cluster %d (%zu px): inside %.3f outside %.3f ratio %.2f\n", i, cluster,
                c.inside_pixels, c.inside_change, c.outside_change, c.ratio());
    EXPECT_GE(c.ratio(), 5.0) << "image " << i;
  }
}

// ------------------------------------------------------------------ 7

TEST(Acceptance, C7_RepresentationProbe) {
  constexpr std::size_t kSize = 32, kPerClass = 100, kSteps = 3000;
  const auto t0 = Clock::now();
  const auto labelled = vsplit::testing::shapes_dataset<float>(kPerClass, kSize, 1);
  const auto unlabelled = vsplit::testing::shapes_dataset<float>(kPerClass, kSize, 2);

  TrainConfig c;
  c.image_size = kSize;
  c.batch_size = 8;
  c.total_steps = kSteps;
  c.warmup_steps = kSteps / 20;
  c.base_lr = 1e-3;
  c.model = ModelConfig::small();
  c.descriptor.num_bins = static_cast<int>(c.model.encoder.hist_bins);

  const auto bundles_of = [&](const LabelledSet<float>& set) {
    Batch<float> b;
    for (std::size_t i = 0; i < set.images.size(); ++i) {
      auto ex = c.descriptor;
      ex.seed = i;
      b.bundles.push_back(extract_bundle(set.images[i], ex));
      b.images.push_back(set.images[i]);
    }
    return b;
  };
  const auto pretrain = bundles_of(unlabelled);
  const auto probe_set = bundles_of(labelled);

  ProbeConfig pc;
  pc.epochs = 200;
  pc.lr = 1e-2;
  const auto accuracy = [&](VisualSplitModel<float>& m, Representation rep) {
    pc.representation = rep;
    const auto before = parameter_hash(m);
    const auto r = probe(m, probe_set.bundles, labelled.labels, labelled.num_classes, pc);
    EXPECT_EQ(r.encoder_hash_before, r.encoder_hash_after);
    EXPECT_EQ(parameter_hash(m), before);
    return *r.accuracy;
  };

  Trainer<float> trainer(c);
  const double random_global = accuracy(trainer.model(), Representation::global);
  const double random_local = accuracy(trainer.model(), Representation::mean_local);
  trainer.run(pretrain);
  const double trained_global = accuracy(trainer.model(), Representation::global);
  const double trained_local = accuracy(trainer.model(), Representation::mean_local);

  std::printf("  %zu classes, %zu labelled images, pretrained %zu steps on %zu unlabelled images\n",
              std::size_t(labelled.num_classes), labelled.images.size(), kSteps, unlabelled.images.size());
  std::printf("  global token : random %.3f  pretrained %.3f  gain %+.1f points\n", random_global, trained_global,
              100 * (trained_global - random_global));
  std::printf("  mean of patch tokens : random %.3f  pretrained %.3f  gain %+.1f points\n", random_local,
              trained_local, 100 * (trained_local - random_local));
  std::printf("  runtime %.0f s\n", seconds_since(t0));
  EXPECT_GE(trained_global - random_global, 0.10);
}

// ------------------------------------------------------------------ 8

TEST(Acceptance, C8_DeterminismAndPersistence) {
  const auto dir = fresh_dir("acceptance_resume");
  auto c = vsplit::testing::tiny_train_config();
  c.model = ModelConfig::small();
  c.image_size = 32;
  c.batch_size = 2;
  c.total_steps = 12;
  c.descriptor.num_bins = static_cast<int>(c.model.encoder.hist_bins);
  c.augment.brightness = 10;
  c.augment.probability = 0.5;
  Batch<float> data;
  for (int i = 0; i < 3; ++i) {
    auto img = pattern_image(32, i);
    data.bundles.push_back(extract_bundle(img, c.descriptor));
    data.images.push_back(std::move(img));
  }
  const auto trace_of = [](std::vector<nlohmann::json>& out) {
    return [&out](const StepRecord& r) { out.push_back(r); };
  };

  std::vector<nlohmann::json> straight, resumed;
  Trainer<float> a(c);
  a.run(data, c.total_steps, trace_of(straight));

  Trainer<float> b(c);
  b.run(data, 5, trace_of(resumed));
  const auto path = (dir / "mid.vsck").string();
  b.save_checkpoint(path);
  auto restored = Trainer<float>::from_checkpoint(path);
  restored->run(data, c.total_steps, trace_of(resumed));

  ASSERT_EQ(straight.size(), resumed.size());
  for (std::size_t i = 0; i < straight.size(); ++i) EXPECT_EQ(straight[i].dump(), resumed[i].dump()) << "step " << i + 1;
  EXPECT_EQ(restored->checkpoint_bytes(), a.checkpoint_bytes());

  for (std::uint64_t seed : {1, 2, 3}) {
    ExtractionConfig ex;
    ex.seed = seed;
    const auto bundle = extract_bundle(random_image(10, 14, seed).cast<float>(), ex);
    const auto bytes = bundle_bytes(bundle);
    EXPECT_EQ(bundle_bytes(bundle_from_bytes<float>(bytes)), bytes);
    const auto file = (dir / ("b" + std::to_string(seed) + ".vsd")).string();
    save_bundle(bundle, file);
    EXPECT_EQ(read_file(file), bytes);
    EXPECT_EQ(load_bundle<float>(file), bundle);
  }
  std::printf("  %zu-step loss trace identical across save/load; bundle round trips byte-exact\n", straight.size());
}

// ------------------------------------------------------------------ 9

TEST(Acceptance, C9_ClusterSweep) {
  const auto dir = fresh_dir("acceptance_sweep");
  const auto set = vsplit::testing::shapes_dataset<float>(6, 32, 3);
  TrainConfig c;
  c.image_size = 32;
  c.batch_size = 8;
  c.total_steps = 60;
  c.warmup_steps = 3;
  c.base_lr = 1e-3;
  c.model = ModelConfig::small();
  c.descriptor.num_bins = static_cast<int>(c.model.encoder.hist_bins);
  ProbeConfig pc;
  pc.epochs = 100;
  const std::vector<int> ks = {2, 4, 6, 8};
  const auto rows = sweep_clusters(ks, c, pc, set);
  const auto csv_path = dir / "sweep.csv";
  write_file(csv_path.string(), sweep_csv(rows));

  std::istringstream csv(read_file(csv_path.string()));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "K,accuracy,psnr,ssim");
  std::size_t n = 0;
  while (std::getline(csv, line)) {
    ASSERT_LT(n, ks.size());
    EXPECT_EQ(std::stoi(line.substr(0, line.find(','))), ks[n]);
    ++n;
  }
  EXPECT_EQ(n, ks.size());
  for (const auto& r : rows) {
    std::printf("  K=%d accuracy %.3f PSNR %.2f SSIM %.4f\n", r.clusters, r.accuracy, r.psnr, r.ssim);
    EXPECT_TRUE(std::isfinite(r.accuracy) && std::isfinite(r.psnr) && std::isfinite(r.ssim));
  }
  std::printf("  reference only: K=6 is the published optimum\n");
}

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new CriterionPrinter);
  return RUN_ALL_TESTS();
}
