#pragma once

// Reconstruction metrics, representation probes, input-independence
// measurements and the cluster-count sweep.

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "visualsplit/model.hpp"
#include "visualsplit/optim.hpp"
#include "visualsplit/training.hpp"

namespace vsplit {

// ------------------------------------------------------------------ metrics

/// 10·log10(1/MSE) for [0,1] images; +infinity when the images are identical.
template <class T>
double psnr(const RGBImage<T>& a, const RGBImage<T>& b) {
  require_shape(a.pixels.shape(), b.pixels.shape(), "psnr");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(double(a.pixels.size()) / se);
}

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (double(size) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) total += g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma));
  for (auto& v : g) v /= total;
  return g;
}

/// Mean SSIM over all fully-contained windows, averaged over channels.
template <class T>
double ssim(const RGBImage<T>& a, const RGBImage<T>& b, const SsimConfig& cfg = {}) {
  require_shape(a.pixels.shape(), b.pixels.shape(), "ssim");
  const auto h = a.height(), w = a.width(), n = cfg.window;
  if (h < n || w < n) {
    throw ShapeError("ssim needs images of at least " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const auto g = gaussian_window(n, cfg.sigma);
  const double c1 = cfg.k1 * cfg.k1, c2 = cfg.k2 * cfg.k2;
  const auto oh = h - n + 1, ow = w - n + 1;

  // separable filtering of x, y, x², y², xy
  auto filter = [&](auto&& f) {
    std::vector<double> rows(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) s += g[k] * f(y, x + k);
        rows[y * ow + x] = s;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) s += g[k] * rows[(y + k) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };

  double total = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    auto X = [&](std::size_t y, std::size_t x) { return double(a.at(y, x, c)); };
    auto Y = [&](std::size_t y, std::size_t x) { return double(b.at(y, x, c)); };
    const auto mx = filter(X), my = filter(Y);
    const auto xx = filter([&](auto y, auto x) { return X(y, x) * X(y, x); });
    const auto yy = filter([&](auto y, auto x) { return Y(y, x) * Y(y, x); });
    const auto xy = filter([&](auto y, auto x) { return X(y, x) * Y(y, x); });
    double s = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = xx[i] - mx[i] * mx[i], vy = yy[i] - my[i] * my[i], cov = xy[i] - mx[i] * my[i];
      s += (2 * mx[i] * my[i] + c1) * (2 * cov + c2) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += s / double(mx.size());
  }
  return total / 3.0;
}

template <class T>
double mean_lightness(const RGBImage<T>& image) {
  const auto lab = rgb_to_lab(image);
  double s = 0;
  const std::size_t n = image.height() * image.width();
  for (std::size_t p = 0; p < n; ++p) s += double(lab.lab[3 * p]);
  return s / double(n);
}

/// Mean absolute difference between the Sobel edge maps of two images.
template <class T>
double edge_distance(const RGBImage<T>& a, const RGBImage<T>& b) {
  require_shape(a.pixels.shape(), b.pixels.shape(), "edge_distance");
  const auto ea = extract_edges(rgb_to_lab(a)).magnitude, eb = extract_edges(rgb_to_lab(b)).magnitude;
  double s = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) s += std::abs(double(ea[i]) - double(eb[i]));
  return s / double(ea.size());
}

// ------------------------------------------------------------------ probe

enum class ProbeMode { linear, finetune };
enum class Representation { global, mean_local };

NLOHMANN_JSON_SERIALIZE_ENUM(ProbeMode, {{ProbeMode::linear, "linear"}, {ProbeMode::finetune, "finetune"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Representation,
                             {{Representation::global, "global"}, {Representation::mean_local, "mean_local"}})

struct ProbeConfig {
  ProbeMode mode = ProbeMode::linear;
  Representation representation = Representation::global;
  std::size_t epochs = 200;
  double lr = 1e-2;
  double encoder_lr = 1e-4;   // finetune only
  double weight_decay = 0.0;  // decoupled decay on the head weight
  std::size_t batch_size = 0;  // 0: full batch
  double test_fraction = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("probe epochs must be positive");
    if (!(lr > 0) || !(encoder_lr >= 0)) throw ConfigError("probe learning rates must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("probe weight_decay must be >= 0");
    if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("test_fraction must lie in (0,1)");
  }

  bool operator==(const ProbeConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"mode", c.mode},         {"representation", c.representation}, {"epochs", c.epochs},
       {"lr", c.lr},             {"encoder_lr", c.encoder_lr},         {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size}, {"test_fraction", c.test_fraction}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.mode = j.value("mode", d.mode);
  c.representation = j.value("representation", d.representation);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.encoder_lr = j.value("encoder_lr", d.encoder_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.test_fraction = j.value("test_fraction", d.test_fraction);
  c.seed = j.value("seed", d.seed);
}

struct MetricReport {
  std::optional<double> accuracy;
  std::optional<double> train_accuracy;
  std::vector<double> per_class_accuracy;
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json::object();
  auto put = [&j](const char* k, const std::optional<double>& v) {
    if (!v) return;
    // JSON has no infinity; identical images report the string "inf"
    if (std::isinf(*v)) j[k] = "inf";
    else j[k] = *v;
  };
  put("accuracy", r.accuracy);
  put("train_accuracy", r.train_accuracy);
  put("psnr", r.psnr);
  put("ssim", r.ssim);
  if (!r.per_class_accuracy.empty()) j["per_class_accuracy"] = r.per_class_accuracy;
  j["encoder_hash_before"] = r.encoder_hash_before;
  j["encoder_hash_after"] = r.encoder_hash_after;
}

struct Split {
  std::vector<std::size_t> train, test;
};

/// Per-class shuffled split; every class with at least two items lands in both halves.
inline Split stratified_split(const std::vector<int>& labels, double test_fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  Split s;
  for (auto& [label, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_test = static_cast<std::size_t>(std::floor(double(idx.size()) * test_fraction));
    if (idx.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

/// FNV-1a over the raw bytes of every parameter whose name starts with `prefix`.
template <class T>
std::uint64_t parameter_hash(const VisualSplitModel<T>& model, std::string_view prefix = {}) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : model.params().entries()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.data());
    for (std::size_t i = 0; i < p.var.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <class T>
std::uint64_t encoder_hash(const VisualSplitModel<T>& model) {
  return parameter_hash(model, "encoder/");
}

namespace detail {

template <class T>
ad::Var<T> representation_of(const EncodedRepresentation<T>& rep, Representation which) {
  if (which == Representation::global) return rep.global_rep;
  const std::size_t tokens = rep.grid_h * rep.grid_w;
  Tensor<T> pool({rep.batch, rep.batch * tokens}, T{0});
  for (std::size_t b = 0; b < rep.batch; ++b)
    for (std::size_t n = 0; n < tokens; ++n) pool.at(b, b * tokens + n) = T{1} / static_cast<T>(tokens);
  return ad::matmul(ad::constant(std::move(pool)), rep.local_reps);
}

template <class T>
ad::Var<T> rows_of(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  const auto d = x.shape()[1];
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.data() + rows[i] * d, d, out.data() + i * d);
  return ad::constant(std::move(out));
}

template <class T>
std::vector<int> predictions(const Tensor<T>& logits) {
  const auto n = logits.shape()[0], c = logits.shape()[1];
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = logits.data() + i * c;
    out[i] = static_cast<int>(std::max_element(r, r + c) - r);
  }
  return out;
}

inline double accuracy_of(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (labels.empty()) return 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return double(hit) / double(labels.size());
}

}  // namespace detail

/// Frozen-encoder features for each bundle, one row per bundle.
template <class T>
Tensor<T> encode_features(const VisualSplitModel<T>& model, const std::vector<DescriptorBundle<T>>& bundles,
                          Representation which, std::size_t chunk = 16) {
  ad::NoGradGuard guard;
  const auto d = model.config().encoder.embed_dim;
  Tensor<T> out({bundles.size(), d});
  for (std::size_t start = 0; start < bundles.size(); start += chunk) {
    const auto end = std::min(bundles.size(), start + chunk);
    const std::vector<DescriptorBundle<T>> part(bundles.begin() + std::ptrdiff_t(start), bundles.begin() + std::ptrdiff_t(end));
    const auto rep = detail::representation_of(model.encoder().encode(encoder_inputs(part)), which).value();
    std::copy(rep.data(), rep.data() + rep.size(), out.data() + start * d);
  }
  return out;
}

/// Trains a linear classifier on encoder representations and reports top-1
/// accuracy on the held-out split. Linear mode never touches the encoder;
/// finetune mode updates it jointly with the head.
template <class T>
MetricReport probe(VisualSplitModel<T>& model, const std::vector<DescriptorBundle<T>>& bundles,
                   const std::vector<int>& labels, int num_classes, const ProbeConfig& config) {
  config.validate();
  if (bundles.size() != labels.size()) throw ShapeError("probe: one label per bundle required");
  if (num_classes < 2) throw ConfigError("probe needs at least two classes");
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw ConfigError("label " + std::to_string(l) + " outside [0," + std::to_string(num_classes) + ")");
  }
  const auto split = stratified_split(labels, config.test_fraction, config.seed);
  if (split.train.empty() || split.test.empty()) throw ConfigError("probe split left an empty train or test set");
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  };
  const auto y_train = pick(split.train), y_test = pick(split.test);
  const auto d = model.config().encoder.embed_dim;
  const auto classes = static_cast<std::size_t>(num_classes);

  MetricReport report;
  report.encoder_hash_before = encoder_hash(model);

  std::mt19937_64 rng(config.seed ^ 0x5bd1e995ull);
  nn::ParamStore<T> head_store;
  auto w = head_store.add("probe/weight", Tensor<T>({d, classes}), true);
  auto b = head_store.add("probe/bias", Tensor<T>({classes}), false);
  AdamWConfig head_opt_cfg;
  head_opt_cfg.weight_decay = config.weight_decay;
  head_opt_cfg.clip_norm = 0;
  AdamW<T> head_opt(head_store, head_opt_cfg);

  std::vector<int> test_pred, train_pred;
  if (config.mode == ProbeMode::linear) {
    const auto features = encode_features(model, bundles, config.representation);
    // standardise with training statistics
    std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
    for (auto i : split.train)
      for (std::size_t k = 0; k < d; ++k) mean[k] += double(features.at(i, k)) / double(split.train.size());
    for (auto i : split.train)
      for (std::size_t k = 0; k < d; ++k) {
        const double v = double(features.at(i, k)) - mean[k];
        inv_std[k] += v * v / double(split.train.size());
      }
    for (auto& v : inv_std) v = 1.0 / std::sqrt(v + 1e-6);
    Tensor<T> z = features;
    for (std::size_t i = 0; i < bundles.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) z.at(i, k) = static_cast<T>((double(features.at(i, k)) - mean[k]) * inv_std[k]);

    const std::size_t bs = config.batch_size == 0 ? split.train.size() : config.batch_size;
    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      if (bs < order.size()) std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::vector<std::size_t> rows(order.begin() + std::ptrdiff_t(s),
                                            order.begin() + std::ptrdiff_t(std::min(order.size(), s + bs)));
        std::vector<int> y;
        for (auto i : rows) y.push_back(labels[i]);
        head_store.zero_grad();
        ad::backward(ad::cross_entropy(ad::linear(detail::rows_of(z, rows), w, b), y));
        head_opt.step(head_store, config.lr);
      }
    }
    ad::NoGradGuard guard;
    test_pred = detail::predictions(ad::linear(detail::rows_of(z, split.test), w, b).value());
    train_pred = detail::predictions(ad::linear(detail::rows_of(z, split.train), w, b).value());
  } else {
    AdamWConfig enc_cfg;
    enc_cfg.weight_decay = 0;
    AdamW<T> enc_opt(model.params(), enc_cfg);
    const std::size_t bs = config.batch_size == 0 ? split.train.size() : config.batch_size;
    std::vector<std::size_t> order = split.train;
    auto logits_for = [&](const std::vector<std::size_t>& rows) {
      std::vector<DescriptorBundle<T>> part;
      for (auto i : rows) part.push_back(bundles[i]);
      const auto rep = detail::representation_of(model.encoder().encode(encoder_inputs(part)), config.representation);
      return ad::linear(ad::layer_norm(rep, ad::Var<T>(), ad::Var<T>()), w, b);
    };
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      if (bs < order.size()) std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::vector<std::size_t> rows(order.begin() + std::ptrdiff_t(s),
                                            order.begin() + std::ptrdiff_t(std::min(order.size(), s + bs)));
        std::vector<int> y;
        for (auto i : rows) y.push_back(labels[i]);
        head_store.zero_grad();
        model.params().zero_grad();
        ad::backward(ad::cross_entropy(logits_for(rows), y));
        head_opt.step(head_store, config.lr);
        enc_opt.step(model.params(), config.encoder_lr);
      }
    }
    model.params().zero_grad();
    ad::NoGradGuard guard;
    test_pred = detail::predictions(logits_for(split.test).value());
    train_pred = detail::predictions(logits_for(split.train).value());
  }

  report.accuracy = detail::accuracy_of(test_pred, y_test);
  report.train_accuracy = detail::accuracy_of(train_pred, y_train);
  std::vector<double> hit(classes, 0), count(classes, 0);
  for (std::size_t i = 0; i < y_test.size(); ++i) {
    count[std::size_t(y_test[i])] += 1;
    hit[std::size_t(y_test[i])] += test_pred[i] == y_test[i];
  }
  for (std::size_t c = 0; c < classes; ++c) report.per_class_accuracy.push_back(count[c] > 0 ? hit[c] / count[c] : 0.0);
  report.encoder_hash_after = encoder_hash(model);
  if (config.mode == ProbeMode::linear && report.encoder_hash_after != report.encoder_hash_before) {
    throw std::logic_error("linear probe modified encoder parameters");
  }
  return report;
}

// ------------------------------------------------------------------ input independence

struct BrightnessVariant {
  double delta_L;
  double mean_L;
  double edge_distance;  // to the delta = 0 reconstruction
};

struct IndependenceReport {
  std::vector<BrightnessVariant> variants;
  double noise_floor;  // edge distance between two independent reconstructions of the same inputs
  int inversions;      // adjacent pairs where mean L drops as delta_L rises
  double worst_inversion;
  bool monotone(double tolerance = 0.5, int allowed = 1) const {
    return inversions <= allowed && worst_inversion <= tolerance;
  }
  double max_edge_distance() const {
    double m = 0;
    for (const auto& v : variants) m = std::max(m, v.edge_distance);
    return m;
  }
};

inline void to_json(nlohmann::json& j, const IndependenceReport& r) {
  j = {{"noise_floor", r.noise_floor}, {"inversions", r.inversions}, {"worst_inversion", r.worst_inversion},
       {"variants", nlohmann::json::array()}};
  for (const auto& v : r.variants) {
    j["variants"].push_back({{"delta_L", v.delta_L}, {"mean_L", v.mean_L}, {"edge_distance", v.edge_distance}});
  }
}

namespace detail {

template <class T>
IndependenceReport brightness_sweep(const VisualSplitModel<T>& model, const DescriptorBundle<T>& bundle,
                                    const RGBImage<T>& baseline, double noise_floor, std::vector<double> deltas) {
  std::sort(deltas.begin(), deltas.end());
  IndependenceReport r{};
  r.noise_floor = noise_floor;
  for (double dl : deltas) {
    auto edited = bundle;
    edited.histogram = shift_histogram(bundle.histogram, dl);
    const auto recon = dl == 0 ? baseline : model.reconstruct(edited);
    r.variants.push_back({dl, mean_lightness(recon), edge_distance(recon, baseline)});
  }
  for (std::size_t i = 1; i < r.variants.size(); ++i) {
    const double drop = r.variants[i - 1].mean_L - r.variants[i].mean_L;
    if (drop > 0) {
      ++r.inversions;
      r.worst_inversion = std::max(r.worst_inversion, drop);
    }
  }
  return r;
}

}  // namespace detail

/// Reconstructs with the histogram shifted by each delta (edges and colour
/// segmentation held fixed). The noise floor is the edge distance between
/// this model's reconstruction and that of `independent`, a second model
/// trained on the same data from another seed.
template <class T>
IndependenceReport input_independence_report(const VisualSplitModel<T>& model, const VisualSplitModel<T>& independent,
                                             const DescriptorBundle<T>& bundle, std::vector<double> deltas) {
  const auto baseline = model.reconstruct(bundle);
  const double floor = edge_distance(baseline, independent.reconstruct(bundle));
  return detail::brightness_sweep(model, bundle, baseline, floor, std::move(deltas));
}

/// Single-model form: the noise floor falls back to the edge distance between
/// the reconstruction and `source`, the image the bundle came from.
template <class T>
IndependenceReport input_independence_report(const VisualSplitModel<T>& model, const DescriptorBundle<T>& bundle,
                                             const RGBImage<T>& source, std::vector<double> deltas) {
  const auto baseline = model.reconstruct(bundle);
  return detail::brightness_sweep(model, bundle, baseline, edge_distance(baseline, source), std::move(deltas));
}

struct ColourEditReport {
  double inside_change;   // mean |Δab| over pixels whose argmax cluster is the edited one
  double outside_change;  // mean |Δab| elsewhere
  std::size_t inside_pixels;
  double ratio() const {
    return outside_change > 0 ? inside_change / outside_change : std::numeric_limits<double>::infinity();
  }
};

inline void to_json(nlohmann::json& j, const ColourEditReport& r) {
  j = {{"inside_change", r.inside_change}, {"outside_change", r.outside_change}, {"inside_pixels", r.inside_pixels}};
  if (std::isinf(r.ratio())) j["ratio"] = "inf";
  else j["ratio"] = r.ratio();
}

template <class T>
ColourEditReport colour_edit_report(const VisualSplitModel<T>& model, const DescriptorBundle<T>& bundle, int cluster,
                                    std::array<double, 2> new_ab) {
  auto edited = bundle;
  edited.segmentation = recolour_region(bundle.segmentation, cluster, new_ab);
  const auto base = rgb_to_lab(model.reconstruct(bundle)), after = rgb_to_lab(model.reconstruct(edited));
  const auto labels = argmax_labels(bundle.segmentation);
  double in = 0, out = 0;
  std::size_t n_in = 0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const double da = double(after.lab[3 * p + 1]) - double(base.lab[3 * p + 1]);
    const double db = double(after.lab[3 * p + 2]) - double(base.lab[3 * p + 2]);
    const double d = std::hypot(da, db);
    if (labels[p] == cluster) {
      in += d;
      ++n_in;
    } else {
      out += d;
    }
  }
  if (n_in == 0) throw std::invalid_argument("cluster " + std::to_string(cluster) + " owns no pixels");
  const auto n_out = labels.size() - n_in;
  return {in / double(n_in), n_out ? out / double(n_out) : 0.0, n_in};
}

// ------------------------------------------------------------------ sweep

struct SweepRow {
  int clusters;
  double accuracy;
  double psnr;
  double ssim;
};

inline void to_json(nlohmann::json& j, const SweepRow& r) {
  j = {{"K", r.clusters}, {"accuracy", r.accuracy}, {"psnr", r.psnr}, {"ssim", r.ssim}};
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "K,accuracy,psnr,ssim\n";
  os.precision(10);
  for (const auto& r : rows) os << r.clusters << ',' << r.accuracy << ',' << r.psnr << ',' << r.ssim << '\n';
  return os.str();
}

/// Labelled images already resized/cropped for training.
template <class T>
struct LabelledSet {
  std::vector<RGBImage<T>> images;
  std::vector<int> labels;
  int num_classes = 0;
};

template <class T>
LabelledSet<T> load_labelled_set(const std::string& root, std::size_t image_size) {
  const auto listing = list_labelled_images(root);
  LabelledSet<T> set;
  set.num_classes = static_cast<int>(listing.classes.size());
  for (std::size_t i = 0; i < listing.paths.size(); ++i) {
    try {
      set.images.push_back(load_training_image<T>(listing.paths[i], image_size));
      set.labels.push_back(listing.labels[i]);
    } catch (const FormatError& e) {
      spdlog::warn("skipping {}: {}", listing.paths[i], e.what());
    }
  }
  if (set.images.empty()) throw FormatError("no readable images under " + root);
  return set;
}

/// Pretrains on the whole set for each K, then probes linearly and measures
/// reconstruction quality on the probe's held-out split.
template <class T>
std::vector<SweepRow> sweep_clusters(const std::vector<int>& Ks, const TrainConfig& train, const ProbeConfig& probe_cfg,
                                     const LabelledSet<T>& data,
                                     const std::function<void(const SweepRow&)>& on_row = {}) {
  if (Ks.empty()) throw ConfigError("sweep needs at least one K");
  std::vector<SweepRow> rows;
  const auto split = stratified_split(data.labels, probe_cfg.test_fraction, probe_cfg.seed);
  for (int k : Ks) {
    auto cfg = train;
    cfg.descriptor.clusters = k;
    cfg.descriptor.init_centroids.clear();
    cfg.metrics_path.clear();
    cfg.checkpoint_every = 0;
    Batch<T> batch;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      auto ex = cfg.descriptor;
      ex.seed = cfg.seed + i;
      batch.bundles.push_back(extract_bundle(data.images[i], ex));
      batch.images.push_back(data.images[i]);
    }
    Trainer<T> trainer(cfg);
    trainer.run(batch);
    const auto report = probe(trainer.model(), batch.bundles, data.labels, data.num_classes, probe_cfg);
    double p = 0, s = 0;
    for (auto i : split.test) {
      const auto recon = trainer.model().reconstruct(batch.bundles[i]);
      p += psnr(recon, data.images[i]);
      s += ssim(recon, data.images[i]);
    }
    rows.push_back({k, *report.accuracy, p / double(split.test.size()), s / double(split.test.size())});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

}  // namespace vsplit
