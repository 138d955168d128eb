#pragma once

// PNG/JPEG decoding and encoding, plus the resize + centre-crop geometry
// used to prepare training images.

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdlib>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "visualsplit/archive.hpp"
#include "visualsplit/image.hpp"

namespace vsplit {

/// 8-bit interleaved RGB.
struct Rgb8Image {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline bool is_png(std::string_view bytes) { return bytes.size() >= 8 && bytes.substr(1, 3) == "PNG"; }
inline bool is_jpeg(std::string_view bytes) {
  return bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
         static_cast<unsigned char>(bytes[1]) == 0xD8;
}

inline Rgb8Image decode_png(std::string_view bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw FormatError(std::string("PNG decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Rgb8Image out{img.height, img.width, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  // composite any alpha onto white
  png_color background{255, 255, 255};
  if (!png_image_finish_read(&img, &background, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("PNG decode failed: " + msg);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline void jpeg_silence(j_common_ptr, int) {}

inline Rgb8Image decode_jpeg(std::string_view bytes) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  err.mgr.emit_message = jpeg_silence;
  Rgb8Image out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.pixels.resize(out.height * out.width * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace detail

inline Rgb8Image decode_image(std::string_view bytes) {
  if (detail::is_png(bytes)) return detail::decode_png(bytes);
  if (detail::is_jpeg(bytes)) return detail::decode_jpeg(bytes);
  throw FormatError("unrecognised image format (expected PNG or JPEG)");
}

inline Rgb8Image read_image(const std::string& path) { return decode_image(read_file(path)); }

inline std::string encode_png(const Rgb8Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

inline std::string encode_jpeg(const Rgb8Image& image, int quality = 95) {
  jpeg_compress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw FormatError(std::string("JPEG encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(image.pixels.data()) + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::string out(reinterpret_cast<const char*>(buffer), size);
  std::free(buffer);
  return out;
}

template <class T>
RGBImage<T> to_float(const Rgb8Image& image) {
  RGBImage<T> out(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) out.pixels[i] = static_cast<T>(image.pixels[i]) / T{255};
  return out;
}

template <class T>
Rgb8Image to_8bit(const RGBImage<T>& image) {
  Rgb8Image out{image.height(), image.width(), std::vector<std::uint8_t>(image.pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double v = std::clamp(double(image.pixels[i]), 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

template <class T>
void write_png(const RGBImage<T>& image, const std::string& path) {
  write_file(path, encode_png(to_8bit(image)));
}

namespace detail {

/// Triangle-filter resampling weights along one axis (antialiased when
/// shrinking): for each output index, first source index and weights.
struct AxisWeights {
  std::vector<std::size_t> first;
  std::vector<std::vector<double>> weights;
};

inline AxisWeights triangle_weights(std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double support = std::max(1.0, scale);
  AxisWeights aw;
  for (std::size_t o = 0; o < out; ++o) {
    const double centre = (static_cast<double>(o) + 0.5) * scale;
    const auto lo = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(centre - support)));
    const auto hi = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(in), std::ceil(centre + support)));
    std::vector<double> w;
    double total = 0;
    for (auto i = lo; i < hi; ++i) {
      const double x = (static_cast<double>(i) + 0.5 - centre) / support;
      const double v = std::max(0.0, 1.0 - std::abs(x));
      w.push_back(v);
      total += v;
    }
    for (auto& v : w) v /= total;
    aw.first.push_back(static_cast<std::size_t>(lo));
    aw.weights.push_back(std::move(w));
  }
  return aw;
}

}  // namespace detail

/// Separable triangle-filter resize.
template <class T>
RGBImage<T> resize(const RGBImage<T>& image, std::size_t out_h, std::size_t out_w) {
  const auto h = image.height(), w = image.width();
  if (out_h == h && out_w == w) return image;
  const auto wx = detail::triangle_weights(w, out_w), wy = detail::triangle_weights(h, out_h);
  std::vector<double> tmp(h * out_w * 3, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t k = 0; k < wx.weights[x].size(); ++k)
        for (std::size_t c = 0; c < 3; ++c)
          tmp[(y * out_w + x) * 3 + c] += wx.weights[x][k] * double(image.at(y, wx.first[x] + k, c));
  RGBImage<T> out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v = 0;
        for (std::size_t k = 0; k < wy.weights[y].size(); ++k) v += wy.weights[y][k] * tmp[((wy.first[y] + k) * out_w + x) * 3 + c];
        out.at(y, x, c) = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

struct CropGeometry {
  std::size_t resized_h, resized_w, top, left;
};

/// Shorter side scaled to `size` (longer side rounded), then a centred
/// size×size window.
inline CropGeometry centre_crop_geometry(std::size_t h, std::size_t w, std::size_t size) {
  if (h == 0 || w == 0 || size == 0) throw ShapeError("empty image or crop size");
  CropGeometry g{};
  if (h <= w) {
    g.resized_h = size;
    g.resized_w = std::max(size, static_cast<std::size_t>(std::lround(double(w) * double(size) / double(h))));
  } else {
    g.resized_w = size;
    g.resized_h = std::max(size, static_cast<std::size_t>(std::lround(double(h) * double(size) / double(w))));
  }
  g.top = (g.resized_h - size) / 2;
  g.left = (g.resized_w - size) / 2;
  return g;
}

template <class T>
RGBImage<T> crop(const RGBImage<T>& image, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > image.height() || left + w > image.width()) throw ShapeError("crop window outside the image");
  RGBImage<T> out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(image.pixels.data() + ((top + y) * image.width() + left) * 3, w * 3, out.pixels.data() + y * w * 3);
  return out;
}

template <class T>
RGBImage<T> resize_and_centre_crop(const RGBImage<T>& image, std::size_t size) {
  const auto g = centre_crop_geometry(image.height(), image.width(), size);
  return crop(resize(image, g.resized_h, g.resized_w), g.top, g.left, size, size);
}

/// Downscales so that neither side exceeds `max_side`, keeping the aspect ratio.
template <class T>
RGBImage<T> limit_size(const RGBImage<T>& image, std::size_t max_side) {
  const auto h = image.height(), w = image.width();
  if (std::max(h, w) <= max_side) return image;
  const double s = double(max_side) / double(std::max(h, w));
  return resize(image, std::max<std::size_t>(1, std::lround(h * s)), std::max<std::size_t>(1, std::lround(w * s)));
}

}  // namespace vsplit
