#pragma once

// .vsd descriptor bundle files.

#include <string>

#include "visualsplit/archive.hpp"
#include "visualsplit/descriptors.hpp"

namespace vsplit {

inline constexpr const char* kBundleMagic = "VSD1";
inline constexpr int kBundleFormatVersion = 1;

template <class T>
std::string bundle_bytes(const DescriptorBundle<T>& b) {
  ArchiveWriter w(kBundleMagic);
  w.header() = {{"format_version", kBundleFormatVersion},
                {"config", b.config},
                {"edge_normalization", b.edges.normalization},
                {"histogram_bandwidth", b.histogram.bandwidth},
                {"segmentation_temperature", b.segmentation.temperature}};
  w.add("edge_magnitude", b.edges.magnitude);
  w.add("seg_assignments", b.segmentation.assignments);
  w.add("seg_centroids", b.segmentation.centroids);
  w.add("hist_weights", b.histogram.weights);
  w.add("hist_centres", b.histogram.bin_centres);
  return w.bytes();
}

template <class T>
DescriptorBundle<T> bundle_from_bytes(std::string bytes) {
  ArchiveReader r(std::move(bytes), kBundleMagic);
  const auto& h = r.header();
  if (h.value("format_version", -1) != kBundleFormatVersion) {
    throw FormatError("unsupported bundle format version " + h.value("format_version", nlohmann::json()).dump());
  }
  DescriptorBundle<T> b;
  try {
    b.config = h.at("config").get<ExtractionConfig>();
    b.edges.normalization = h.at("edge_normalization").get<double>();
    b.histogram.bandwidth = h.at("histogram_bandwidth").get<double>();
    b.segmentation.temperature = h.at("segmentation_temperature").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed bundle header: ") + ex.what());
  }
  b.edges.magnitude = r.get<T>("edge_magnitude");
  b.segmentation.assignments = r.get<T>("seg_assignments");
  b.segmentation.centroids = r.get<T>("seg_centroids");
  b.histogram.weights = r.get<T>("hist_weights");
  b.histogram.bin_centres = r.get<T>("hist_centres");

  const auto& e = b.edges.magnitude.shape();
  const auto& a = b.segmentation.assignments.shape();
  const auto k = static_cast<std::size_t>(b.config.clusters);
  const auto bins = static_cast<std::size_t>(b.config.num_bins);
  if (e.size() != 2 || a != Shape{e[0], e[1], k} || b.segmentation.centroids.shape() != Shape{k, 2} ||
      b.histogram.weights.shape() != Shape{bins} || b.histogram.bin_centres.shape() != Shape{bins}) {
    throw FormatError("bundle arrays are inconsistent with its config");
  }
  return b;
}

template <class T>
void save_bundle(const DescriptorBundle<T>& b, const std::string& path) {
  write_file(path, bundle_bytes(b));
}

template <class T = float>
DescriptorBundle<T> load_bundle(const std::string& path) {
  return bundle_from_bytes<T>(read_file(path));
}

}  // namespace vsplit
