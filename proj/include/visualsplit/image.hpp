#pragma once

#include <cstddef>
#include <string>

#include "visualsplit/tensor.hpp"

namespace vsplit {

/// sRGB image, H×W×3 interleaved, channel values in [0,1].
template <class T = float>
struct RGBImage {
  Tensor<T> pixels;

  RGBImage() = default;
  explicit RGBImage(Tensor<T> px) : pixels(std::move(px)) { validate(); }
  RGBImage(std::size_t height, std::size_t width, T fill = T{0}) : pixels({height, width, 3}, fill) {}

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  T& at(std::size_t y, std::size_t x, std::size_t c) { return pixels.at(y, x, c); }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const { return pixels.at(y, x, c); }

  void validate() const {
    if (pixels.rank() != 3 || pixels.dim(2) != 3 || pixels.dim(0) == 0 || pixels.dim(1) == 0) {
      throw ShapeError("RGB image must be H×W×3 with positive sides, got " + to_string(pixels.shape()));
    }
    for (T v : pixels.values()) {
      if (!(v >= T{0} && v <= T{1})) throw std::invalid_argument("RGB image values must lie in [0,1]");
    }
  }

  template <class U>
  RGBImage<U> cast() const {
    RGBImage<U> out;
    out.pixels = pixels.template cast<U>();
    return out;
  }

  bool operator==(const RGBImage&) const = default;
};

/// CIE-LAB image, H×W×3 interleaved as (L, a, b).
template <class T = float>
struct LabImage {
  Tensor<T> lab;

  std::size_t height() const { return lab.dim(0); }
  std::size_t width() const { return lab.dim(1); }
  T L(std::size_t y, std::size_t x) const { return lab.at(y, x, 0); }
  T a(std::size_t y, std::size_t x) const { return lab.at(y, x, 1); }
  T b(std::size_t y, std::size_t x) const { return lab.at(y, x, 2); }
};

}  // namespace vsplit
