#pragma once

// Descriptor visualisations: edge map, recoloured segmentation, histogram chart.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "visualsplit/descriptors.hpp"
#include "visualsplit/image_io.hpp"

namespace vsplit {

/// Edge magnitude as grey, brightest at the image's own maximum.
template <class T>
Rgb8Image edge_preview(const EdgeMap<T>& edges) {
  const auto h = edges.magnitude.dim(0), w = edges.magnitude.dim(1);
  double peak = 0;
  for (T v : edges.magnitude.values()) peak = std::max(peak, double(v));
  Rgb8Image out{h, w, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t p = 0; p < h * w; ++p) {
    const double v = peak > 0 ? double(edges.magnitude[p]) / peak : 0.0;
    std::fill_n(out.pixels.begin() + std::ptrdiff_t(3 * p), 3, static_cast<std::uint8_t>(std::lround(255.0 * v)));
  }
  return out;
}

/// Rendered ab at constant L = 50.
template <class T>
Rgb8Image segmentation_preview(const ColourSegmentationMap<T>& seg) {
  RGBImage<T> img;
  img.pixels = render_segmentation(seg).display_rgb;
  return to_8bit(img);
}

/// One bar per bin on a white canvas, `bar_width` pixels per bin and
/// `height` pixels tall; the tallest bar fills the canvas.
template <class T>
Rgb8Image histogram_preview(const GreyLevelHistogram<T>& hist, std::size_t bar_width = 2, std::size_t height = 100) {
  const auto bins = hist.num_bins();
  Rgb8Image out{height, bins * bar_width, std::vector<std::uint8_t>(height * bins * bar_width * 3, 255)};
  double peak = 0;
  for (T v : hist.weights.values()) peak = std::max(peak, double(v));
  for (std::size_t i = 0; i < bins; ++i) {
    const double frac = peak > 0 ? double(hist.weights[i]) / peak : 0.0;
    const auto bar = static_cast<std::size_t>(std::lround(frac * double(height)));
    // bar shade follows the bin's grey level
    const auto shade = static_cast<std::uint8_t>(std::lround(std::min(200.0, 2.0 * double(hist.bin_centres[i]))));
    for (std::size_t y = height - bar; y < height; ++y)
      for (std::size_t x = i * bar_width; x < (i + 1) * bar_width; ++x)
        std::fill_n(out.pixels.begin() + std::ptrdiff_t(3 * (y * out.width + x)), 3, shade);
  }
  return out;
}

}  // namespace vsplit
