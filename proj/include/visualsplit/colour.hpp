#pragma once

// sRGB <-> CIE-LAB (D65). The forward direction is differentiable.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>

#include "visualsplit/image.hpp"
#include "visualsplit/ops.hpp"

namespace vsplit {

namespace colour {

// Linear sRGB -> XYZ. The white point is taken as the row sums so that
// (1,1,1) maps to a = b = 0 exactly.
inline constexpr std::array<double, 9> kRgbToXyz = {
    0.4124564, 0.3575761, 0.1804375,  //
    0.2126729, 0.7151522, 0.0721750,  //
    0.0193339, 0.1191920, 0.9503041};

inline constexpr std::array<double, 3> kWhite = {
    kRgbToXyz[0] + kRgbToXyz[1] + kRgbToXyz[2],
    kRgbToXyz[3] + kRgbToXyz[4] + kRgbToXyz[5],
    kRgbToXyz[6] + kRgbToXyz[7] + kRgbToXyz[8]};

inline constexpr double kDelta = 6.0 / 29.0;
inline constexpr double kEpsilon = kDelta * kDelta * kDelta;

template <class T>
T srgb_to_linear(T c) {
  return c <= T(0.04045) ? c / T(12.92) : std::pow((c + T(0.055)) / T(1.055), T(2.4));
}

template <class T>
T srgb_to_linear_deriv(T c) {
  return c <= T(0.04045) ? T(1) / T(12.92) : T(2.4) / T(1.055) * std::pow((c + T(0.055)) / T(1.055), T(1.4));
}

template <class T>
T linear_to_srgb(T c) {
  return c <= T(0.0031308) ? T(12.92) * c : T(1.055) * std::pow(c, T(1) / T(2.4)) - T(0.055);
}

template <class T>
T lab_f(T t) {
  return t > T(kEpsilon) ? std::cbrt(t) : t / T(3 * kDelta * kDelta) + T(4.0 / 29.0);
}

template <class T>
T lab_f_deriv(T t) {
  if (t > T(kEpsilon)) {
    const T r = std::cbrt(t);
    return T(1) / (T(3) * r * r);
  }
  return T(1) / T(3 * kDelta * kDelta);
}

template <class T>
T lab_f_inv(T f) {
  return f > T(kDelta) ? f * f * f : T(3 * kDelta * kDelta) * (f - T(4.0 / 29.0));
}

/// One pixel sRGB -> LAB.
template <class T>
std::array<T, 3> rgb_to_lab(T r, T g, T b) {
  const T lin[3] = {srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)};
  T f[3];
  for (int i = 0; i < 3; ++i) {
    const T xyz = T(kRgbToXyz[3 * i]) * lin[0] + T(kRgbToXyz[3 * i + 1]) * lin[1] + T(kRgbToXyz[3 * i + 2]) * lin[2];
    f[i] = lab_f(xyz / T(kWhite[i]));
  }
  return {T(116) * f[1] - T(16), T(500) * (f[0] - f[1]), T(200) * (f[1] - f[2])};
}

/// One pixel LAB -> sRGB, clamped into [0,1].
template <class T>
std::array<T, 3> lab_to_rgb(T L, T a, T b) {
  static const Eigen::Matrix3d inverse =
      Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(kRgbToXyz.data()).inverse();
  const double fy = (double(L) + 16.0) / 116.0;
  const double fx = fy + double(a) / 500.0;
  const double fz = fy - double(b) / 200.0;
  const Eigen::Vector3d xyz(kWhite[0] * lab_f_inv(fx), kWhite[1] * lab_f_inv(fy), kWhite[2] * lab_f_inv(fz));
  const Eigen::Vector3d lin = inverse * xyz;
  std::array<T, 3> out{};
  for (int i = 0; i < 3; ++i) out[i] = T(std::clamp(linear_to_srgb(lin[i]), 0.0, 1.0));
  return out;
}

}  // namespace colour

namespace ad {

/// Differentiable sRGB -> LAB over any tensor whose last axis has 3 channels.
template <class T>
Var<T> rgb_to_lab(const Var<T>& rgb) {
  if (rgb.shape().empty() || rgb.shape().back() != 3) throw ShapeError("rgb_to_lab: last axis must have 3 channels");
  Tensor<T> out(rgb.shape());
  const std::size_t n = rgb.size() / 3;
  for (std::size_t p = 0; p < n; ++p) {
    const T* px = rgb.data() + 3 * p;
    const auto lab = colour::rgb_to_lab(px[0], px[1], px[2]);
    std::copy(lab.begin(), lab.end(), out.data() + 3 * p);
  }
  return record<T>(std::move(out), {rgb}, [rgb, n](Node<T>& o) {
    using namespace colour;
    auto g = rgb.node()->grad_buffer();
    for (std::size_t p = 0; p < n; ++p) {
      const T* px = rgb.data() + 3 * p;
      const T* dy = o.grad.data() + 3 * p;
      T lin[3], dlin_dc[3];
      for (int i = 0; i < 3; ++i) {
        lin[i] = srgb_to_linear(px[i]);
        dlin_dc[i] = srgb_to_linear_deriv(px[i]);
      }
      const T df[3] = {T(500) * dy[1], T(116) * dy[0] - T(500) * dy[1] + T(200) * dy[2], T(-200) * dy[2]};
      T dxyz[3];
      for (int i = 0; i < 3; ++i) {
        const T xyz =
            T(kRgbToXyz[3 * i]) * lin[0] + T(kRgbToXyz[3 * i + 1]) * lin[1] + T(kRgbToXyz[3 * i + 2]) * lin[2];
        dxyz[i] = df[i] * lab_f_deriv(xyz / T(kWhite[i])) / T(kWhite[i]);
      }
      for (int j = 0; j < 3; ++j) {
        const T dl = T(kRgbToXyz[j]) * dxyz[0] + T(kRgbToXyz[3 + j]) * dxyz[1] + T(kRgbToXyz[6 + j]) * dxyz[2];
        g[3 * p + j] += dl * dlin_dc[j];
      }
    }
  });
}

}  // namespace ad

template <class T>
LabImage<T> rgb_to_lab(const RGBImage<T>& image) {
  ad::NoGradGuard guard;
  return LabImage<T>{ad::rgb_to_lab(ad::constant(image.pixels)).value()};
}

template <class T>
RGBImage<T> lab_to_rgb(const LabImage<T>& lab) {
  RGBImage<T> out(lab.height(), lab.width());
  const std::size_t n = lab.height() * lab.width();
  for (std::size_t p = 0; p < n; ++p) {
    const T* px = lab.lab.data() + 3 * p;
    const auto rgb = colour::lab_to_rgb(px[0], px[1], px[2]);
    std::copy(rgb.begin(), rgb.end(), out.pixels.data() + 3 * p);
  }
  return out;
}

}  // namespace vsplit
