#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "visualsplit/losses.hpp"

using namespace vsplit;
using vsplit::testing::check_gradient;
using vsplit::testing::random_tensor;

namespace {

RGBImage<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  return RGBImage<double>(random_tensor({h, w, 3}, seed, lo, hi));
}

ExtractionConfig small_extraction() {
  ExtractionConfig c;
  c.clusters = 3;
  c.iterations = 5;
  c.num_bins = 20;
  c.bandwidth = 4.0;
  return c;
}

LossConfig all_on() {
  LossConfig c;
  c.perceptual_seed = 3;
  return c;
}

TEST(LossConfig, ValidationAndJson) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.w_pixel = c.w_perceptual = c.w_edge = c.w_hist = c.w_colour = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.w_edge = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.perceptual_mode = PerceptualMode::pretrained_features;
  EXPECT_THROW(c.validate(), ConfigError);
  c.perceptual_weights = "feat.vspf";
  c.l1_reduction = Reduction::sum;
  EXPECT_EQ(nlohmann::json(c).get<LossConfig>(), c);
}

TEST(PixelLoss, Examples) {
  const auto a = random_image(4, 4, 1, 0.0, 0.8);
  EXPECT_EQ(pixel_loss(a, a), 0.0);
  auto b = a;
  for (auto& v : b.pixels.values()) v += 0.1;
  EXPECT_NEAR(pixel_loss(b, a), 0.01, 1e-12);

  const auto c = random_image(4, 4, 2);
  double ref = 0;
  for (std::size_t i = 0; i < 48; ++i) ref += (a.pixels[i] - c.pixels[i]) * (a.pixels[i] - c.pixels[i]);
  EXPECT_NEAR(pixel_loss(a, c), ref / 48, 1e-9);
  EXPECT_THROW(pixel_loss(a, random_image(4, 5, 3)), ShapeError);
}

TEST(PerceptualLoss, IdentitySymmetryAndContrast) {
  const auto cfg = all_on();
  const auto a = random_image(16, 16, 4);
  const auto b = random_image(16, 16, 5);
  EXPECT_EQ(perceptual_loss(a, a, cfg), 0.0);
  EXPECT_NEAR(perceptual_loss(a, b, cfg), perceptual_loss(b, a, cfg), 1e-9);
  EXPECT_GT(perceptual_loss(a, b, cfg), 0.0);

  // a low-contrast image around grey, then the same with doubled contrast
  auto lo = random_image(16, 16, 6, 0.35, 0.65);
  auto hi = lo;
  for (auto& v : hi.pixels.values()) v = 0.5 + 2.0 * (v - 0.5);
  const auto ref = random_image(16, 16, 7, 0.35, 0.65);
  EXPECT_GT(perceptual_loss(hi, ref, cfg), perceptual_loss(lo, ref, cfg));

  auto off = cfg;
  off.perceptual_mode = PerceptualMode::off;
  EXPECT_THROW(perceptual_loss(a, b, off), ConfigError);
}

TEST(PerceptualLoss, PretrainedWeightsRoundTrip) {
  const auto path = ::testing::TempDir() + "/features.vspf";
  PerceptualFeatures<double>::random(11).save(path);
  auto cfg = all_on();
  cfg.perceptual_seed = 11;
  auto pre = cfg;
  pre.perceptual_mode = PerceptualMode::pretrained_features;
  pre.perceptual_weights = path;
  const auto a = random_image(8, 8, 8), b = random_image(8, 8, 9);
  EXPECT_EQ(perceptual_loss(a, b, pre), perceptual_loss(a, b, cfg));
  pre.perceptual_weights = ::testing::TempDir() + "/missing.vspf";
  EXPECT_THROW(perceptual_loss(a, b, pre), FormatError);
}

TEST(DescriptorLoss, PerfectReconstructionIsZero) {
  const auto img = random_image(12, 12, 10);
  const auto bundle = extract_bundle(img, ExtractionConfig{});
  const auto d = descriptor_consistency_loss(img, bundle, all_on());
  EXPECT_LT(d.edge, 1e-6);
  EXPECT_LT(d.hist, 1e-6);
  EXPECT_LT(d.colour, 1e-6);

  // also in single precision
  const auto imgf = img.cast<float>();
  const auto df = descriptor_consistency_loss(imgf, extract_bundle(imgf, ExtractionConfig{}), all_on());
  EXPECT_LT(df.edge + df.hist + df.colour, 1e-6);
}

TEST(DescriptorLoss, HistogramTermTwoBinToy) {
  ad::NoGradGuard guard;
  const auto d = ad::constant(Tensor<double>({2}, {1.0, 0.0}));
  const auto dhat = ad::constant(Tensor<double>({2}, {0.0, 1.0}));
  const double eps = 1e-6;
  const double expected = 0.5 * (1.0 / (1.0 + eps) + 1.0 / (1.0 + eps));
  EXPECT_NEAR(ad::chi_square_distance(d, dhat, eps).item(), expected, 1e-9);
  EXPECT_NEAR(expected, 0.999999, 1e-9);
}

TEST(DescriptorLoss, ConstantOffsets) {
  const auto img = random_image(8, 8, 12);
  auto bundle = extract_bundle(img, small_extraction());
  for (auto& v : bundle.edges.magnitude.values()) v -= 0.1;  // d̂_e = d_e + 0.1
  // rendered ab moves by −10 everywhere, i.e. 0.1 in colour-term units
  for (auto& v : bundle.segmentation.centroids.values()) v -= 0.1 * kAbScale;
  auto cfg = all_on();
  auto d = descriptor_consistency_loss(img, bundle, cfg);
  EXPECT_NEAR(d.edge, 0.1, 1e-9);
  EXPECT_NEAR(d.colour, 0.1, 1e-9);
  EXPECT_LT(d.hist, 1e-12);

  cfg.l1_reduction = Reduction::sum;
  d = descriptor_consistency_loss(img, bundle, cfg);
  EXPECT_NEAR(d.edge, 0.1 * 64, 1e-9);
  EXPECT_NEAR(d.colour, 0.1 * 128, 1e-9);
}

TEST(TotalLoss, Composition) {
  const auto target = random_image(8, 8, 13);
  const auto recon = random_image(8, 8, 14);
  const auto bundle = extract_bundle(target, small_extraction());

  LossConfig pixel_only;
  pixel_only.w_perceptual = pixel_only.w_edge = pixel_only.w_hist = pixel_only.w_colour = 0;
  EXPECT_DOUBLE_EQ(total_loss(recon, target, bundle, pixel_only).total, pixel_loss(recon, target));

  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 3; ++trial) {
    LossConfig c = all_on();
    c.w_pixel = u(rng);
    c.w_perceptual = u(rng);
    c.w_edge = u(rng);
    c.w_hist = u(rng);
    c.w_colour = u(rng);
    EXPECT_LT(total_loss(target, target, bundle, c).total, 1e-6);
    const auto r = total_loss(recon, target, bundle, c);
    const std::array<double, 5> w = {c.w_pixel, c.w_perceptual, c.w_edge, c.w_hist, c.w_colour};
    double dot = 0;
    for (int i = 0; i < 5; ++i) dot += w[i] * r.components()[i];
    EXPECT_NEAR(r.total, dot, 1e-9);
    EXPECT_NEAR(r.pixel, pixel_loss(recon, target), 1e-12);
    EXPECT_NEAR(r.perceptual, perceptual_loss(recon, target, c), 1e-12);
  }
}

TEST(LossInvariants, NonNegativeSymmetricBounded) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 30;
    Tensor<double> a({n}), b({n});
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      // sparse histograms stress the denominator
      a[i] = rng() % 3 == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      b[i] = rng() % 3 == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      sa += a[i];
      sb += b[i];
    }
    if (sa == 0 || sb == 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] /= sa;
      b[i] /= sb;
    }
    ad::NoGradGuard guard;
    const double ab = ad::chi_square_distance(ad::constant(a), ad::constant(b), 1e-6).item();
    const double ba = ad::chi_square_distance(ad::constant(b), ad::constant(a), 1e-6).item();
    EXPECT_GE(ab, 0.0);
    EXPECT_EQ(ab, ba);
    EXPECT_LE(ab, 2.0);
  }
  for (int trial = 0; trial < 3; ++trial) {
    const auto target = random_image(8, 8, 100 + trial);
    const auto r = total_loss(random_image(8, 8, 200 + trial), target, extract_bundle(target, small_extraction()),
                              all_on());
    for (double v : r.components()) EXPECT_GE(v, 0.0);
  }
}

TEST(LossGradients, TotalLossWrtReconstruction) {
  const auto target = random_image(8, 8, 17);
  const auto bundle = extract_bundle(target, small_extraction());
  const auto feats = PerceptualFeatures<double>::random(3);
  const auto t = ad::constant(target.pixels.reshaped({1, 8, 8, 3}));
  for (auto weights : {std::array<double, 5>{1, 0.5, 0.2, 0.2, 0.2}, std::array<double, 5>{0, 0, 0, 1, 0},
                       std::array<double, 5>{0, 0, 0, 0, 1}}) {
    LossConfig c = all_on();
    c.w_pixel = weights[0];
    c.w_perceptual = weights[1];
    c.w_edge = weights[2];
    c.w_hist = weights[3];
    c.w_colour = weights[4];
    const auto r = check_gradient(
        [&](const ad::Var<double>& x) { return compute_losses<double>(x, t, {bundle}, c, &feats).total; },
        random_tensor({1, 8, 8, 3}, 18, 0.1, 0.9), 19, 1e-6);
    EXPECT_LT(r.relative_error, 1e-3);
    EXPECT_GT(r.numeric_norm, 0);
  }
}

TEST(LossGradients, RejectsMismatchedShapes) {
  const auto target = random_image(8, 8, 20);
  const auto bundle = extract_bundle(target, small_extraction());
  EXPECT_THROW(descriptor_consistency_loss(random_image(8, 6, 21), bundle, all_on()), ShapeError);
}

}  // namespace
