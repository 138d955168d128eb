#pragma once

// Pre-training objective: pixel MSE, a frozen-feature perceptual distance and
// the three descriptor-consistency terms computed by re-extracting
// descriptors from the reconstruction.

#include <nlohmann/json.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "visualsplit/archive.hpp"
#include "visualsplit/descriptors.hpp"

namespace vsplit {

enum class PerceptualMode { off, random_features, pretrained_features };
enum class Reduction { mean, sum };

NLOHMANN_JSON_SERIALIZE_ENUM(PerceptualMode, {{PerceptualMode::off, "off"},
                                              {PerceptualMode::random_features, "random_features"},
                                              {PerceptualMode::pretrained_features, "pretrained_features"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Reduction, {{Reduction::mean, "mean"}, {Reduction::sum, "sum"}})

struct LossConfig {
  double w_pixel = 1.0;
  double w_perceptual = 0.5;
  double w_edge = 0.2;
  double w_hist = 0.2;
  double w_colour = 0.2;
  double epsilon = 1e-6;
  PerceptualMode perceptual_mode = PerceptualMode::random_features;
  Reduction l1_reduction = Reduction::mean;
  std::uint64_t perceptual_seed = 0;
  std::string perceptual_weights;  // archive path for pretrained_features

  void validate() const {
    for (double w : {w_pixel, w_perceptual, w_edge, w_hist, w_colour}) {
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (w_pixel + w_perceptual + w_edge + w_hist + w_colour <= 0) throw ConfigError("at least one loss weight must be > 0");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be > 0");
    if (perceptual_mode == PerceptualMode::pretrained_features && perceptual_weights.empty()) {
      throw ConfigError("pretrained_features needs perceptual_weights");
    }
  }

  bool operator==(const LossConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"w_pixel", c.w_pixel},
       {"w_perceptual", c.w_perceptual},
       {"w_edge", c.w_edge},
       {"w_hist", c.w_hist},
       {"w_colour", c.w_colour},
       {"epsilon", c.epsilon},
       {"perceptual_mode", c.perceptual_mode},
       {"l1_reduction", c.l1_reduction},
       {"perceptual_seed", c.perceptual_seed},
       {"perceptual_weights", c.perceptual_weights}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  LossConfig d;
  c.w_pixel = j.value("w_pixel", d.w_pixel);
  c.w_perceptual = j.value("w_perceptual", d.w_perceptual);
  c.w_edge = j.value("w_edge", d.w_edge);
  c.w_hist = j.value("w_hist", d.w_hist);
  c.w_colour = j.value("w_colour", d.w_colour);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.perceptual_mode = j.value("perceptual_mode", d.perceptual_mode);
  c.l1_reduction = j.value("l1_reduction", d.l1_reduction);
  c.perceptual_seed = j.value("perceptual_seed", d.perceptual_seed);
  c.perceptual_weights = j.value("perceptual_weights", d.perceptual_weights);
}

struct LossReport {
  double total = 0, pixel = 0, perceptual = 0, edge = 0, hist = 0, colour = 0;

  /// Components in weight order: pixel, perceptual, edge, hist, colour.
  std::array<double, 5> components() const { return {pixel, perceptual, edge, hist, colour}; }
  bool operator==(const LossReport&) const = default;
};

inline void to_json(nlohmann::json& j, const LossReport& r) {
  j = {{"total", r.total}, {"pixel", r.pixel}, {"perceptual", r.perceptual},
       {"edge", r.edge},   {"hist", r.hist},   {"colour", r.colour}};
}

inline void from_json(const nlohmann::json& j, LossReport& r) {
  r.total = j.at("total");
  r.pixel = j.at("pixel");
  r.perceptual = j.at("perceptual");
  r.edge = j.at("edge");
  r.hist = j.at("hist");
  r.colour = j.at("colour");
}

namespace ad {

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mse");
  return mean(square(sub(a, b)));
}

template <class T>
Var<T> l1_distance(const Var<T>& a, const Var<T>& b, Reduction r) {
  detail::require_same(a.shape(), b.shape(), "l1_distance");
  auto d = abs(sub(a, b));
  return r == Reduction::mean ? mean(d) : sum(d);
}

/// (1/N) Σ (d − d̂)² / (d + d̂ + ε) over N bins.
template <class T>
Var<T> chi_square_distance(const Var<T>& d, const Var<T>& dhat, T epsilon) {
  detail::require_same(d.shape(), dhat.shape(), "chi_square_distance");
  return mean(div(square(sub(d, dhat)), add_scalar(add(d, dhat), epsilon)));
}

}  // namespace ad

/// Frozen convolutional pyramid 3→8→16→32 (strides 1, 2, 2, ReLU) whose
/// activations define the perceptual distance.
template <class T>
class PerceptualFeatures {
 public:
  struct Layer {
    ad::Var<T> weight, bias;
    std::size_t stride;
  };

  static constexpr std::array<std::size_t, 4> kChannels = {3, 8, 16, 32};
  static constexpr std::array<std::size_t, 3> kStrides = {1, 2, 2};
  static constexpr const char* kMagic = "VSPF";

  static PerceptualFeatures random(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    PerceptualFeatures f;
    for (std::size_t i = 0; i < kStrides.size(); ++i) {
      const auto in = kChannels[i], out = kChannels[i + 1];
      const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
      Tensor<T> w({out, in, 3, 3});
      for (auto& v : w.values()) v = static_cast<T>(std::normal_distribution<double>(0, stddev)(rng));
      f.layers_.push_back({ad::constant(std::move(w)), ad::constant(Tensor<T>({out})), kStrides[i]});
    }
    return f;
  }

  /// Loads conv{i}/weight [out,in,3,3] and conv{i}/bias [out] from an archive.
  static PerceptualFeatures load(const std::string& path) {
    const auto r = ArchiveReader::from_file(path, kMagic);
    PerceptualFeatures f;
    for (std::size_t i = 0; i < kStrides.size(); ++i) {
      const auto in = kChannels[i], out = kChannels[i + 1];
      const auto name = "conv" + std::to_string(i);
      f.layers_.push_back({ad::constant(r.get<T>(name + "/weight", {out, in, 3, 3})),
                           ad::constant(r.get<T>(name + "/bias", {out})), kStrides[i]});
    }
    return f;
  }

  void save(const std::string& path) const {
    ArchiveWriter w(kMagic);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      w.add("conv" + std::to_string(i) + "/weight", layers_[i].weight.value());
      w.add("conv" + std::to_string(i) + "/bias", layers_[i].bias.value());
    }
    w.write(path);
  }

  static PerceptualFeatures from_config(const LossConfig& c) {
    switch (c.perceptual_mode) {
      case PerceptualMode::random_features: return random(c.perceptual_seed);
      case PerceptualMode::pretrained_features: return load(c.perceptual_weights);
      case PerceptualMode::off: break;
    }
    throw ConfigError("perceptual loss requested while perceptual_mode is off");
  }

  /// Activations of every layer for one image [H,W,3] in [0,1].
  std::vector<ad::Var<T>> features(const ad::Var<T>& image) const {
    const auto h = image.dim(0), w = image.dim(1);
    std::vector<std::size_t> idx(h * w * 3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < h * w; ++p) idx[c * h * w + p] = 3 * p + c;
    auto x = ad::add_scalar(ad::scale(ad::gather(image, std::move(idx), {3, h, w}), T{2}), T{-1});
    std::vector<ad::Var<T>> out;
    for (const auto& l : layers_) {
      x = ad::relu(ad::conv2d(x, l.weight, l.bias, l.stride, 1));
      out.push_back(x);
    }
    return out;
  }

  /// Σ over layers of the mean squared feature difference.
  ad::Var<T> distance(const ad::Var<T>& a, const ad::Var<T>& b) const {
    const auto fa = features(a), fb = features(b);
    std::vector<ad::Var<T>> terms;
    for (std::size_t i = 0; i < fa.size(); ++i) terms.push_back(ad::mse(fa[i], fb[i]));
    return ad::weighted_sum(terms, std::vector<T>(terms.size(), T{1}));
  }

  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
};

/// Differentiable loss terms for one batch plus their numeric report.
template <class T>
struct LossTerms {
  ad::Var<T> total, pixel, perceptual, edge, hist, colour;
  LossReport report;
};

template <class T>
struct DescriptorTerms {
  ad::Var<T> edge, hist, colour;
};

/// Re-extracts descriptors from one reconstruction [H,W,3] with the bundle's
/// extraction config (k-means warm-started from the bundle's recorded
/// initial centroids) and compares them against the bundle. The colour term
/// measures rendered (a,b) in units of kAbScale.
template <class T>
DescriptorTerms<T> descriptor_terms(const ad::Var<T>& recon, const DescriptorBundle<T>& bundle, const LossConfig& c) {
  if (recon.shape() != Shape{bundle.height(), bundle.width(), 3}) {
    throw ShapeError("reconstruction " + to_string(recon.shape()) + " does not match bundle size");
  }
  const auto vars = extract_descriptor_vars(recon, bundle.config);
  const auto n = bundle.height() * bundle.width();
  const auto k = bundle.segmentation.clusters();
  Tensor<T> target_ab;
  {
    ad::NoGradGuard guard;
    target_ab = ad::scale(ad::matmul(ad::constant(bundle.segmentation.assignments.reshaped({n, k})),
                                     ad::constant(bundle.segmentation.centroids)),
                          static_cast<T>(1.0 / kAbScale))
                    .value();
  }
  const auto recon_ab = ad::scale(vars.ab_render, static_cast<T>(1.0 / kAbScale));
  return {ad::l1_distance(vars.edges, ad::constant(bundle.edges.magnitude), c.l1_reduction),
          ad::chi_square_distance(ad::constant(bundle.histogram.weights), vars.histogram, static_cast<T>(c.epsilon)),
          ad::l1_distance(recon_ab, ad::constant(std::move(target_ab)), c.l1_reduction)};
}

/// Full objective over a batch: recon and target are [B,H,W,3]. Every term is
/// averaged over the batch.
template <class T>
LossTerms<T> compute_losses(const ad::Var<T>& recon, const ad::Var<T>& target,
                            const std::vector<DescriptorBundle<T>>& bundles, const LossConfig& c,
                            const PerceptualFeatures<T>* perceptual) {
  c.validate();
  ad::detail::require_same(recon.shape(), target.shape(), "compute_losses");
  if (recon.shape().size() != 4 || recon.dim(0) != bundles.size()) {
    throw ShapeError("reconstruction batch does not match bundle count");
  }
  const auto b = recon.dim(0), h = recon.dim(1), w = recon.dim(2);
  const auto per = h * w * 3;
  const bool with_perceptual = c.perceptual_mode != PerceptualMode::off;
  if (with_perceptual && perceptual == nullptr) throw ConfigError("perceptual features not provided");

  std::vector<ad::Var<T>> perc, edge, hist, colour;
  for (std::size_t i = 0; i < b; ++i) {
    const auto r = ad::slice(recon, i * per, {h, w, 3});
    if (with_perceptual) perc.push_back(perceptual->distance(r, ad::slice(target, i * per, {h, w, 3})));
    auto d = descriptor_terms(r, bundles[i], c);
    edge.push_back(d.edge);
    hist.push_back(d.hist);
    colour.push_back(d.colour);
  }
  const std::vector<T> avg(b, T{1} / static_cast<T>(b));
  LossTerms<T> out;
  out.pixel = ad::mse(recon, target);
  out.perceptual = with_perceptual ? ad::weighted_sum(perc, avg) : ad::constant(Tensor<T>({1}));
  out.edge = ad::weighted_sum(edge, avg);
  out.hist = ad::weighted_sum(hist, avg);
  out.colour = ad::weighted_sum(colour, avg);
  out.total = ad::weighted_sum<T>(
      {out.pixel, out.perceptual, out.edge, out.hist, out.colour},
      {T(c.w_pixel), T(c.w_perceptual), T(c.w_edge), T(c.w_hist), T(c.w_colour)});
  auto& r = out.report;
  r.pixel = double(out.pixel.item());
  r.perceptual = double(out.perceptual.item());
  r.edge = double(out.edge.item());
  r.hist = double(out.hist.item());
  r.colour = double(out.colour.item());
  r.total = c.w_pixel * r.pixel + c.w_perceptual * r.perceptual + c.w_edge * r.edge + c.w_hist * r.hist +
            c.w_colour * r.colour;
  return out;
}

// ------------------------------------------------------------------ value API

template <class T>
double pixel_loss(const RGBImage<T>& recon, const RGBImage<T>& target) {
  ad::NoGradGuard guard;
  return double(ad::mse(ad::constant(recon.pixels), ad::constant(target.pixels)).item());
}

template <class T>
double perceptual_loss(const RGBImage<T>& recon, const RGBImage<T>& target, const LossConfig& c) {
  if (c.perceptual_mode == PerceptualMode::off) throw ConfigError("perceptual loss requested while perceptual_mode is off");
  require_shape(recon.pixels.shape(), target.pixels.shape(), "perceptual_loss");
  ad::NoGradGuard guard;
  const auto f = PerceptualFeatures<T>::from_config(c);
  return double(f.distance(ad::constant(recon.pixels), ad::constant(target.pixels)).item());
}

struct DescriptorLoss {
  double edge, hist, colour;
};

template <class T>
DescriptorLoss descriptor_consistency_loss(const RGBImage<T>& recon, const DescriptorBundle<T>& bundle,
                                           const LossConfig& c) {
  ad::NoGradGuard guard;
  const auto d = descriptor_terms(ad::constant(recon.pixels), bundle, c);
  return {double(d.edge.item()), double(d.hist.item()), double(d.colour.item())};
}

template <class T>
LossReport total_loss(const RGBImage<T>& recon, const RGBImage<T>& target, const DescriptorBundle<T>& bundle,
                      const LossConfig& c) {
  ad::NoGradGuard guard;
  const auto add_batch = [](const Tensor<T>& t) { return ad::constant(t.reshaped({1, t.dim(0), t.dim(1), 3})); };
  if (c.perceptual_mode == PerceptualMode::off) {
    return compute_losses<T>(add_batch(recon.pixels), add_batch(target.pixels), {bundle}, c, nullptr).report;
  }
  const auto f = PerceptualFeatures<T>::from_config(c);
  return compute_losses<T>(add_batch(recon.pixels), add_batch(target.pixels), {bundle}, c, &f).report;
}

}  // namespace vsplit
