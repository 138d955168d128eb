#pragma once

// Classical descriptors of an image: Sobel edge magnitude of L, soft k-means
// colour segmentation of (a,b), and a Gaussian-smoothed histogram of L. All
// extraction paths are differentiable with respect to the input pixels.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "visualsplit/colour.hpp"
#include "visualsplit/image.hpp"
#include "visualsplit/ops.hpp"

namespace vsplit {

inline constexpr double kEdgeDelta = 1e-8;
/// Largest Sobel magnitude reachable with L in [0,100]: 100·sqrt(20).
inline const double kEdgeNormalizer = 200.0 * std::sqrt(5.0);
inline constexpr double kMaxL = 100.0;
inline constexpr double kAbLimit = 128.0;
/// Unit in which (a,b) enters the networks and the colour consistency term,
/// so that colour is of the same order as the normalised edges.
inline constexpr double kAbScale = 100.0;

struct ExtractionConfig {
  int clusters = 6;
  int iterations = 10;
  double temperature = 25.0;
  int num_bins = 100;
  double bandwidth = 2.0;
  std::uint64_t seed = 0;
  std::size_t seeding_subsample = 1024;
  /// Starting centroids for soft k-means. Empty means k-means++ seeding; an
  /// extracted bundle always records the values it actually started from.
  std::vector<std::array<double, 2>> init_centroids;

  void validate() const {
    if (clusters < 1) throw ConfigError("cluster count must be >= 1");
    if (iterations < 1) throw ConfigError("k-means iterations must be >= 1");
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
    if (num_bins < 2) throw ConfigError("histogram needs at least 2 bins");
    if (!(bandwidth > 0)) throw ConfigError("histogram bandwidth must be > 0");
    if (seeding_subsample < 1) throw ConfigError("seeding subsample must be >= 1");
    if (!init_centroids.empty() && init_centroids.size() != static_cast<std::size_t>(clusters)) {
      throw ConfigError("init_centroids must have one entry per cluster");
    }
  }

  bool operator==(const ExtractionConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ExtractionConfig& c) {
  j = nlohmann::json{{"clusters", c.clusters},         {"iterations", c.iterations},
                     {"temperature", c.temperature},   {"num_bins", c.num_bins},
                     {"bandwidth", c.bandwidth},       {"seed", c.seed},
                     {"seeding_subsample", c.seeding_subsample}, {"init_centroids", c.init_centroids}};
}

inline void from_json(const nlohmann::json& j, ExtractionConfig& c) {
  ExtractionConfig d;
  c.clusters = j.value("clusters", d.clusters);
  c.iterations = j.value("iterations", d.iterations);
  c.temperature = j.value("temperature", d.temperature);
  c.num_bins = j.value("num_bins", d.num_bins);
  c.bandwidth = j.value("bandwidth", d.bandwidth);
  c.seed = j.value("seed", d.seed);
  c.seeding_subsample = j.value("seeding_subsample", d.seeding_subsample);
  c.init_centroids = j.value("init_centroids", d.init_centroids);
}

template <class T = float>
struct EdgeMap {
  Tensor<T> magnitude;  // [H,W], raw Sobel magnitude divided by `normalization`
  double normalization = kEdgeNormalizer;

  bool operator==(const EdgeMap&) const = default;
};

template <class T = float>
struct GreyLevelHistogram {
  Tensor<T> weights;      // [bins], sums to 1
  Tensor<T> bin_centres;  // [bins], strictly increasing over [0,100]
  double bandwidth = 2.0;

  std::size_t num_bins() const { return weights.size(); }
  double bin_width() const { return kMaxL / static_cast<double>(num_bins()); }
  /// Expected L under the histogram.
  double mean_level() const {
    double m = 0;
    for (std::size_t i = 0; i < num_bins(); ++i) m += double(weights[i]) * double(bin_centres[i]);
    return m;
  }

  bool operator==(const GreyLevelHistogram&) const = default;
};

template <class T = float>
struct ColourSegmentationMap {
  Tensor<T> assignments;  // [H,W,K], rows sum to 1
  Tensor<T> centroids;    // [K,2] in (a,b)
  double temperature = 25.0;

  std::size_t clusters() const { return centroids.dim(0); }
  std::size_t height() const { return assignments.dim(0); }
  std::size_t width() const { return assignments.dim(1); }

  bool operator==(const ColourSegmentationMap&) const = default;
};

template <class T = float>
struct SegmentationRender {
  Tensor<T> ab_render;    // [H,W,2]
  Tensor<T> display_rgb;  // [H,W,3]
};

template <class T = float>
struct DescriptorBundle {
  EdgeMap<T> edges;
  ColourSegmentationMap<T> segmentation;
  GreyLevelHistogram<T> histogram;
  ExtractionConfig config;

  std::size_t height() const { return edges.magnitude.dim(0); }
  std::size_t width() const { return edges.magnitude.dim(1); }

  bool operator==(const DescriptorBundle&) const = default;
};

inline std::vector<double> histogram_bin_centres(int num_bins) {
  std::vector<double> c(static_cast<std::size_t>(num_bins));
  const double w = kMaxL / num_bins;
  for (int i = 0; i < num_bins; ++i) c[static_cast<std::size_t>(i)] = (i + 0.5) * w;
  return c;
}

namespace detail {
inline std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}
}  // namespace detail

namespace ad {

/// Channel `c` of an interleaved [H,W,C] tensor as [H,W].
template <class T>
Var<T> channel(const Var<T>& x, std::size_t c) {
  const auto h = x.dim(0), w = x.dim(1), ch = x.dim(2);
  std::vector<std::size_t> idx(h * w);
  for (std::size_t p = 0; p < h * w; ++p) idx[p] = p * ch + c;
  return gather(x, std::move(idx), {h, w});
}

/// Channels [first, first+count) of an interleaved [H,W,C] tensor as [H·W, count].
template <class T>
Var<T> channels_as_rows(const Var<T>& x, std::size_t first, std::size_t count) {
  const auto h = x.dim(0), w = x.dim(1), ch = x.dim(2);
  std::vector<std::size_t> idx(h * w * count);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t k = 0; k < count; ++k) idx[p * count + k] = p * ch + first + k;
  return gather(x, std::move(idx), {h * w, count});
}

/// sqrt(Gx² + Gy² + delta) / normalization of a [H,W] map, 3×3 Sobel with
/// reflect padding.
template <class T>
Var<T> sobel_magnitude(const Var<T>& lum, T delta, T normalization) {
  detail::require_rank(lum.shape(), 2, "sobel_magnitude");
  const auto h = static_cast<std::ptrdiff_t>(lum.dim(0)), w = static_cast<std::ptrdiff_t>(lum.dim(1));
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  auto gx = std::make_shared<Buffer<T>>(lum.size());
  auto gy = std::make_shared<Buffer<T>>(lum.size());
  Tensor<T> out(lum.shape());
  const T* L = lum.data();
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      T sx{0}, sy{0};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const T v = L[::vsplit::detail::reflect(y + dy, h) * w + ::vsplit::detail::reflect(x + dx, w)];
          sx += T(kx[dy + 1][dx + 1]) * v;
          sy += T(ky[dy + 1][dx + 1]) * v;
        }
      const auto p = static_cast<std::size_t>(y * w + x);
      (*gx)[p] = sx;
      (*gy)[p] = sy;
      out[p] = std::sqrt(sx * sx + sy * sy + delta) / normalization;
    }
  return record<T>(std::move(out), {lum}, [lum, gx, gy, h, w, normalization](Node<T>& o) {
    auto g = lum.node()->grad_buffer();
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        const auto p = static_cast<std::size_t>(y * w + x);
        const T raw = o.value[p] * normalization;
        const T dsx = o.grad[p] * (*gx)[p] / (raw * normalization);
        const T dsy = o.grad[p] * (*gy)[p] / (raw * normalization);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto src = static_cast<std::size_t>(::vsplit::detail::reflect(y + dy, h) * w +
                                                      ::vsplit::detail::reflect(x + dx, w));
            g[src] += T(kx[dy + 1][dx + 1]) * dsx + T(ky[dy + 1][dx + 1]) * dsy;
          }
      }
  });
}

/// Normalised Gaussian-kernel histogram of the values in `lum`.
template <class T>
Var<T> gaussian_histogram(const Var<T>& lum, std::vector<T> centres, T bandwidth) {
  const auto bins = centres.size();
  const T inv2s2 = T{1} / (T{2} * bandwidth * bandwidth);
  std::vector<T> raw(bins, T{0});
  const T* L = lum.data();
  for (std::size_t p = 0; p < lum.size(); ++p)
    for (std::size_t i = 0; i < bins; ++i) {
      const T d = L[p] - centres[i];
      raw[i] += std::exp(-d * d * inv2s2);
    }
  T z{0};
  for (T r : raw) z += r;
  Tensor<T> out({bins});
  for (std::size_t i = 0; i < bins; ++i) out[i] = raw[i] / z;
  return record<T>(std::move(out), {lum}, [lum, centres = std::move(centres), inv2s2, z](Node<T>& o) {
    const auto bins = centres.size();
    T dot{0};
    for (std::size_t i = 0; i < bins; ++i) dot += o.grad[i] * o.value[i];
    std::vector<T> draw(bins);
    for (std::size_t i = 0; i < bins; ++i) draw[i] = (o.grad[i] - dot) / z;
    auto g = lum.node()->grad_buffer();
    const T* L = lum.data();
    for (std::size_t p = 0; p < lum.size(); ++p) {
      T acc{0};
      for (std::size_t i = 0; i < bins; ++i) {
        const T d = L[p] - centres[i];
        acc += draw[i] * std::exp(-d * d * inv2s2) * (T{-2} * d * inv2s2);
      }
      g[p] += acc;
    }
  });
}

/// Soft assignments softmax(−‖ab_p − c_k‖² / temperature) → [P,K].
template <class T>
Var<T> soft_assign(const Var<T>& ab, const Var<T>& centroids, T temperature) {
  const auto n = ab.dim(0), k = centroids.dim(0);
  Tensor<T> out({n, k});
  std::vector<T> logit(k);
  for (std::size_t p = 0; p < n; ++p) {
    const T a = ab.data()[2 * p], b = ab.data()[2 * p + 1];
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const T da = a - centroids.data()[2 * j], db = b - centroids.data()[2 * j + 1];
      logit[j] = -(da * da + db * db) / temperature;
      mx = std::max(mx, logit[j]);
    }
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += (out[p * k + j] = std::exp(logit[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[p * k + j] /= s;
  }
  return record<T>(std::move(out), {ab, centroids}, [ab, centroids, temperature, n, k](Node<T>& o) {
    T* gab = ab.requires_grad() ? ab.node()->grad_buffer().data() : nullptr;
    T* gc = centroids.requires_grad() ? centroids.node()->grad_buffer().data() : nullptr;
    for (std::size_t p = 0; p < n; ++p) {
      const T* A = o.value.data() + p * k;
      const T* dA = o.grad.data() + p * k;
      T dot{0};
      for (std::size_t j = 0; j < k; ++j) dot += dA[j] * A[j];
      const T a = ab.data()[2 * p], b = ab.data()[2 * p + 1];
      for (std::size_t j = 0; j < k; ++j) {
        // d logit / d dist² = −1/temperature; d dist² / d ab = 2(ab − c)
        const T dd = -A[j] * (dA[j] - dot) / temperature;
        const T da = T{2} * (a - centroids.data()[2 * j]) * dd;
        const T db = T{2} * (b - centroids.data()[2 * j + 1]) * dd;
        if (gab) {
          gab[2 * p] += da;
          gab[2 * p + 1] += db;
        }
        if (gc) {
          gc[2 * j] -= da;
          gc[2 * j + 1] -= db;
        }
      }
    }
  });
}

/// Below this soft mass (in pixels) a cluster keeps its previous centroid:
/// the weighted mean of a near-empty cluster is numerically meaningless and
/// its gradient scales with 1/mass.
inline constexpr double kMinClusterMass = 1e-3;

/// Assignment-weighted means of ab per cluster → [K,2]. A near-empty cluster
/// keeps its previous centroid.
template <class T>
Var<T> weighted_centroids(const Var<T>& assign, const Var<T>& ab, const Var<T>& previous) {
  const auto n = assign.dim(0), k = assign.dim(1);
  auto mass = std::make_shared<Buffer<T>>(k, T{0});
  Tensor<T> out({k, 2}, T{0});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < k; ++j) {
      const T w = assign.data()[p * k + j];
      (*mass)[j] += w;
      out[2 * j] += w * ab.data()[2 * p];
      out[2 * j + 1] += w * ab.data()[2 * p + 1];
    }
  constexpr T tiny = T(kMinClusterMass);
  for (std::size_t j = 0; j < k; ++j) {
    if ((*mass)[j] > tiny) {
      out[2 * j] /= (*mass)[j];
      out[2 * j + 1] /= (*mass)[j];
    } else {
      out[2 * j] = previous.data()[2 * j];
      out[2 * j + 1] = previous.data()[2 * j + 1];
    }
  }
  return record<T>(std::move(out), {assign, ab, previous}, [assign, ab, previous, mass, n, k](Node<T>& o) {
    T* gA = assign.requires_grad() ? assign.node()->grad_buffer().data() : nullptr;
    T* gab = ab.requires_grad() ? ab.node()->grad_buffer().data() : nullptr;
    T* gprev = previous.requires_grad() ? previous.node()->grad_buffer().data() : nullptr;
    constexpr T tiny = T(kMinClusterMass);
    for (std::size_t j = 0; j < k; ++j) {
      if ((*mass)[j] <= tiny && gprev) {
        gprev[2 * j] += o.grad[2 * j];
        gprev[2 * j + 1] += o.grad[2 * j + 1];
      }
    }
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t j = 0; j < k; ++j) {
        if ((*mass)[j] <= tiny) continue;
        const T inv = T{1} / (*mass)[j];
        const T dca = o.grad[2 * j], dcb = o.grad[2 * j + 1];
        const T a = ab.data()[2 * p], b = ab.data()[2 * p + 1];
        if (gA) gA[p * k + j] += inv * (dca * (a - o.value[2 * j]) + dcb * (b - o.value[2 * j + 1]));
        if (gab) {
          const T w = assign.data()[p * k + j] * inv;
          gab[2 * p] += w * dca;
          gab[2 * p + 1] += w * dcb;
        }
      }
  });
}

}  // namespace ad

/// k-means++ seeding over a pixel-order-invariant subsample: pixels are
/// ordered by (a,b) value before the seeded draw. Returns pixel indices.
template <class T>
std::vector<std::size_t> kmeanspp_seed_indices(std::span<const T> ab, std::size_t clusters, std::uint64_t seed,
                                               std::size_t subsample) {
  const std::size_t n = ab.size() / 2;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return std::pair(ab[2 * i], ab[2 * i + 1]) < std::pair(ab[2 * j], ab[2 * j + 1]);
  });
  std::mt19937_64 rng(seed);
  if (n > subsample) {
    // partial Fisher-Yates over positions in the value-sorted order
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    for (std::size_t i = 0; i < subsample; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
      std::swap(pos[i], pos[j]);
    }
    pos.resize(subsample);
    std::sort(pos.begin(), pos.end());
    std::vector<std::size_t> picked(subsample);
    for (std::size_t i = 0; i < subsample; ++i) picked[i] = order[pos[i]];
    order = std::move(picked);
  }
  const auto uniform01 = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  std::vector<std::size_t> chosen;
  chosen.push_back(order[static_cast<std::size_t>(rng() % order.size())]);
  std::vector<double> d2(order.size(), std::numeric_limits<double>::infinity());
  while (chosen.size() < clusters) {
    const std::size_t last = chosen.back();
    double total = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const double da = double(ab[2 * order[i]]) - double(ab[2 * last]);
      const double db = double(ab[2 * order[i] + 1]) - double(ab[2 * last + 1]);
      d2[i] = std::min(d2[i], da * da + db * db);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double target = uniform01() * total, acc = 0;
      pick = order.size() - 1;
      for (std::size_t i = 0; i < order.size(); ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng() % order.size());
    }
    chosen.push_back(order[pick]);
  }
  return chosen;
}

/// Differentiable descriptor graph for one image.
template <class T>
struct DescriptorVars {
  ad::Var<T> lab;          // [H,W,3]
  ad::Var<T> edges;        // [H,W], normalised
  ad::Var<T> histogram;    // [bins]
  ad::Var<T> assignments;  // [H·W,K]
  ad::Var<T> centroids;    // [K,2]
  ad::Var<T> ab_render;    // [H·W,2]
  std::vector<std::array<double, 2>> init_centroids;
};

/// Fixed-iteration soft k-means over ab [P,2] from `init` [K,2]. Returns
/// (assignments against the final centroids, final centroids).
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> soft_kmeans(const ad::Var<T>& ab, ad::Var<T> init, int iterations, T temperature) {
  ad::Var<T> c = std::move(init);
  for (int t = 0; t < iterations; ++t) {
    auto a = ad::soft_assign(ab, c, temperature);
    c = ad::weighted_centroids(a, ab, c);
  }
  return {ad::soft_assign(ab, c, temperature), c};
}

/// Starting centroids for ab [P,2]: config.init_centroids when present,
/// otherwise k-means++ seeds gathered (differentiably) from ab.
template <class T>
ad::Var<T> initial_centroids(const ad::Var<T>& ab, const ExtractionConfig& config) {
  const auto k = static_cast<std::size_t>(config.clusters);
  if (!config.init_centroids.empty()) {
    Tensor<T> c({k, 2});
    for (std::size_t j = 0; j < k; ++j) {
      c[2 * j] = static_cast<T>(config.init_centroids[j][0]);
      c[2 * j + 1] = static_cast<T>(config.init_centroids[j][1]);
    }
    return ad::constant(std::move(c));
  }
  const auto seeds = kmeanspp_seed_indices<T>(ab.value().span(), k, config.seed, config.seeding_subsample);
  std::vector<std::size_t> idx;
  for (auto s : seeds) {
    idx.push_back(2 * s);
    idx.push_back(2 * s + 1);
  }
  auto gathered = ad::gather(ab, std::move(idx), {k, 2});
  // Images with fewer distinct colours than K repeat seeds. Exact copies stay
  // locked together through every update, and that symmetric state is
  // unstable, so the unrolled gradient explodes. Spread repeats on a small
  // circle instead.
  Tensor<T> offset({k, 2}, T{0});
  bool repeated = false;
  const double radius = 0.5 * std::sqrt(config.temperature);
  for (std::size_t j = 1; j < k; ++j) {
    std::size_t copies = 0;
    for (std::size_t i = 0; i < j; ++i) {
      copies += gathered.data()[2 * i] == gathered.data()[2 * j] &&
                gathered.data()[2 * i + 1] == gathered.data()[2 * j + 1];
    }
    if (copies == 0) continue;
    repeated = true;
    const double angle = 2.0 * std::numbers::pi * double(copies) / double(k);
    offset[2 * j] = static_cast<T>(radius * std::cos(angle));
    offset[2 * j + 1] = static_cast<T>(radius * std::sin(angle));
  }
  return repeated ? ad::add(gathered, ad::constant(std::move(offset))) : gathered;
}

/// Runs the whole extraction graph on an [H,W,3] RGB variable.
template <class T>
DescriptorVars<T> extract_descriptor_vars(const ad::Var<T>& rgb, const ExtractionConfig& config) {
  config.validate();
  DescriptorVars<T> out;
  out.lab = ad::rgb_to_lab(rgb);
  out.edges = ad::sobel_magnitude(ad::channel(out.lab, 0), T(kEdgeDelta), T(kEdgeNormalizer));
  auto centres = histogram_bin_centres(config.num_bins);
  out.histogram = ad::gaussian_histogram(ad::reshape(ad::channel(out.lab, 0), {rgb.dim(0) * rgb.dim(1)}),
                                         std::vector<T>(centres.begin(), centres.end()), T(config.bandwidth));
  auto ab = ad::channels_as_rows(out.lab, 1, 2);
  auto init = initial_centroids(ab, config);
  for (std::size_t j = 0; j < init.dim(0); ++j) {
    out.init_centroids.push_back({double(init.data()[2 * j]), double(init.data()[2 * j + 1])});
  }
  std::tie(out.assignments, out.centroids) = soft_kmeans(ab, init, config.iterations, T(config.temperature));
  out.ab_render = ad::matmul(out.assignments, out.centroids);
  return out;
}

// ------------------------------------------------------------------ value API

template <class T>
EdgeMap<T> extract_edges(const LabImage<T>& lab) {
  ad::NoGradGuard guard;
  auto L = ad::channel(ad::constant(lab.lab), 0);
  return EdgeMap<T>{ad::sobel_magnitude(L, T(kEdgeDelta), T(kEdgeNormalizer)).value(), kEdgeNormalizer};
}

template <class T>
GreyLevelHistogram<T> extract_histogram(const LabImage<T>& lab, int num_bins, double bandwidth) {
  if (num_bins < 2) throw ConfigError("histogram needs at least 2 bins");
  if (!(bandwidth > 0)) throw ConfigError("histogram bandwidth must be > 0");
  ad::NoGradGuard guard;
  auto L = ad::reshape(ad::channel(ad::constant(lab.lab), 0), {lab.height() * lab.width()});
  const auto centres = histogram_bin_centres(num_bins);
  std::vector<T> c(centres.begin(), centres.end());
  GreyLevelHistogram<T> h;
  h.weights = ad::gaussian_histogram(L, c, T(bandwidth)).value();
  h.bin_centres = Tensor<T>({c.size()}, c);
  h.bandwidth = bandwidth;
  return h;
}

template <class T>
ColourSegmentationMap<T> extract_colour_segments(const LabImage<T>& lab, const ExtractionConfig& config) {
  config.validate();
  ad::NoGradGuard guard;
  auto ab = ad::channels_as_rows(ad::constant(lab.lab), 1, 2);
  auto [assign, centroids] = soft_kmeans(ab, initial_centroids(ab, config), config.iterations, T(config.temperature));
  const auto k = static_cast<std::size_t>(config.clusters);
  return ColourSegmentationMap<T>{assign.value().reshaped({lab.height(), lab.width(), k}), centroids.value(),
                                  config.temperature};
}

template <class T>
ColourSegmentationMap<T> extract_colour_segments(const LabImage<T>& lab, int clusters, int iterations,
                                                 double temperature, std::uint64_t seed) {
  ExtractionConfig c;
  c.clusters = clusters;
  c.iterations = iterations;
  c.temperature = temperature;
  c.seed = seed;
  return extract_colour_segments(lab, c);
}

/// Entropy-regularised k-means objective Σ a·‖ab−c‖² + τ Σ a·log a.
template <class T>
double soft_kmeans_free_energy(std::span<const T> ab, std::span<const T> assign, std::span<const T> centroids,
                               double temperature) {
  const std::size_t n = ab.size() / 2, k = centroids.size() / 2;
  double f = 0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < k; ++j) {
      const double a = assign[p * k + j];
      const double da = double(ab[2 * p]) - double(centroids[2 * j]);
      const double db = double(ab[2 * p + 1]) - double(centroids[2 * j + 1]);
      f += a * (da * da + db * db);
      if (a > 0) f += temperature * a * std::log(a);
    }
  return f;
}

/// Free energy after each (assign, update) iteration of the extraction.
template <class T>
std::vector<double> soft_kmeans_energy_trace(const LabImage<T>& lab, const ExtractionConfig& config) {
  config.validate();
  ad::NoGradGuard guard;
  auto ab = ad::channels_as_rows(ad::constant(lab.lab), 1, 2);
  auto c = initial_centroids(ab, config);
  const T tau = T(config.temperature);
  std::vector<double> trace;
  for (int t = 0; t < config.iterations; ++t) {
    auto a = ad::soft_assign(ab, c, tau);
    c = ad::weighted_centroids(a, ab, c);
    trace.push_back(soft_kmeans_free_energy<T>(ab.value().span(), a.value().span(), c.value().span(), config.temperature));
  }
  return trace;
}

template <class T>
SegmentationRender<T> render_segmentation(const ColourSegmentationMap<T>& seg) {
  const auto h = seg.height(), w = seg.width(), k = seg.clusters();
  SegmentationRender<T> r{Tensor<T>({h, w, 2}), Tensor<T>({h, w, 3})};
  {
    ad::NoGradGuard guard;
    auto ab = ad::matmul(ad::constant(seg.assignments.reshaped({h * w, k})), ad::constant(seg.centroids));
    r.ab_render = ab.value().reshaped({h, w, 2});
  }
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto rgb = colour::lab_to_rgb(T(50), r.ab_render[2 * p], r.ab_render[2 * p + 1]);
    std::copy(rgb.begin(), rgb.end(), r.display_rgb.data() + 3 * p);
  }
  return r;
}

/// Index of the dominant cluster for every pixel, [H,W].
template <class T>
std::vector<int> argmax_labels(const ColourSegmentationMap<T>& seg) {
  const auto n = seg.height() * seg.width(), k = seg.clusters();
  std::vector<int> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    const T* a = seg.assignments.data() + p * k;
    out[p] = static_cast<int>(std::max_element(a, a + k) - a);
  }
  return out;
}

template <class T>
ColourSegmentationMap<T> recolour_region(const ColourSegmentationMap<T>& seg, int cluster_index,
                                         std::array<double, 2> new_ab) {
  if (cluster_index < 0 || static_cast<std::size_t>(cluster_index) >= seg.clusters()) {
    throw IndexError("cluster index " + std::to_string(cluster_index) + " outside [0," +
                     std::to_string(seg.clusters()) + ")");
  }
  for (double v : new_ab) {
    if (!(v >= -kAbLimit && v <= kAbLimit - 1)) throw std::invalid_argument("new (a,b) outside [-128,127]");
  }
  ColourSegmentationMap<T> out = seg;
  out.centroids[2 * static_cast<std::size_t>(cluster_index)] = static_cast<T>(new_ab[0]);
  out.centroids[2 * static_cast<std::size_t>(cluster_index) + 1] = static_cast<T>(new_ab[1]);
  return out;
}

/// Histogram of a virtually brightness-shifted image: every bin's mass moves
/// by delta_L with linear interpolation; overflow lands in the end bins.
template <class T>
GreyLevelHistogram<T> shift_histogram(const GreyLevelHistogram<T>& hist, double delta_L) {
  const auto n = hist.num_bins();
  const double shift = delta_L / hist.bin_width();
  std::vector<double> moved(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) + shift;
    const double lo = std::floor(pos);
    const double frac = pos - lo;
    const auto clamp_bin = [n](double b) {
      return static_cast<std::size_t>(std::clamp(b, 0.0, static_cast<double>(n - 1)));
    };
    moved[clamp_bin(lo)] += (1.0 - frac) * double(hist.weights[i]);
    if (frac > 0) moved[clamp_bin(lo + 1)] += frac * double(hist.weights[i]);
  }
  const double total = std::accumulate(moved.begin(), moved.end(), 0.0);
  GreyLevelHistogram<T> out = hist;
  for (std::size_t i = 0; i < n; ++i) out.weights[i] = static_cast<T>(moved[i] / total);
  return out;
}

template <class T>
DescriptorBundle<T> extract_bundle(const RGBImage<T>& image, const ExtractionConfig& config) {
  ad::NoGradGuard guard;
  auto vars = extract_descriptor_vars(ad::constant(image.pixels), config);
  const auto h = image.height(), w = image.width(), k = static_cast<std::size_t>(config.clusters);
  DescriptorBundle<T> b;
  b.edges = EdgeMap<T>{vars.edges.value(), kEdgeNormalizer};
  const auto centres = histogram_bin_centres(config.num_bins);
  b.histogram.weights = vars.histogram.value();
  b.histogram.bin_centres = Tensor<T>({centres.size()}, std::vector<T>(centres.begin(), centres.end()));
  b.histogram.bandwidth = config.bandwidth;
  b.segmentation = ColourSegmentationMap<T>{vars.assignments.value().reshaped({h, w, k}), vars.centroids.value(),
                                            config.temperature};
  b.config = config;
  b.config.init_centroids = vars.init_centroids;
  return b;
}

}  // namespace vsplit
