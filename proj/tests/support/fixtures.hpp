#pragma once

// Shared test fixtures: scratch directories, a small synthetic image and a
// tiny model/training configuration that trains in milliseconds.

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "visualsplit/image_io.hpp"
#include "visualsplit/training.hpp"

namespace vsplit::testing {

inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::path(::testing::TempDir()) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Rgb8Image gradient_image(std::size_t h, std::size_t w) {
  Rgb8Image img{h, w, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      auto* px = img.pixels.data() + (y * w + x) * 3;
      px[0] = static_cast<std::uint8_t>(255 * x / (w - 1));
      px[1] = static_cast<std::uint8_t>(255 * y / (h - 1));
      px[2] = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
    }
  return img;
}

inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.image_size = 16;
  c.batch_size = 2;
  c.total_steps = 20;
  c.warmup_steps = 2;
  c.base_lr = 1e-3;
  c.seed = 5;
  auto& e = c.model.encoder;
  e.patch_size = 4;
  e.embed_dim = 16;
  e.depth = 2;
  e.num_heads = 2;
  e.hist_token_count = 2;
  e.hist_bins = 10;
  e.mlp_ratio = 2;
  e.block_pattern = alternating_blocks(2);
  auto& d = c.model.decoder;
  d.embed_dim = 8;
  d.depth = 1;
  d.num_heads = 2;
  d.patch_size = 4;
  d.mlp_ratio = 2;
  c.descriptor.clusters = 3;
  c.descriptor.iterations = 4;
  c.descriptor.num_bins = 10;
  c.descriptor.bandwidth = 10;
  return c;
}

}  // namespace vsplit::testing
