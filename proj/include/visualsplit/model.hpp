#pragma once

// Encoder + decoder pair sharing one parameter store.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <random>

#include "visualsplit/decoder.hpp"

namespace vsplit {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  void validate() const {
    encoder.validate();
    decoder.validate(encoder);
  }

  /// Reduced configuration used for desk-scale experiments at 64×64.
  static ModelConfig small() {
    ModelConfig c;
    c.encoder.patch_size = 8;
    c.encoder.embed_dim = 128;
    c.encoder.depth = 4;
    c.encoder.num_heads = 4;
    c.encoder.block_pattern = alternating_blocks(4);
    c.decoder.patch_size = 8;
    c.decoder.embed_dim = 64;
    c.decoder.depth = 2;
    c.decoder.num_heads = 4;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) { j = {{"encoder", c.encoder}, {"decoder", c.decoder}}; }

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.encoder = j.value("encoder", EncoderConfig{});
  c.decoder = j.value("decoder", DecoderConfig{});
}

template <class T>
class VisualSplitModel {
 public:
  VisualSplitModel(const ModelConfig& config, std::uint64_t seed)
      : config_((config.validate(), config)),
        rng_(seed),
        encoder_(params_, config_.encoder, rng_),
        decoder_(params_, config_.decoder, config_.encoder, rng_) {}

  VisualSplitModel(const VisualSplitModel&) = delete;
  VisualSplitModel& operator=(const VisualSplitModel&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const ConditionedEncoder<T>& encoder() const { return encoder_; }
  const LightDecoder<T>& decoder() const { return decoder_; }

  ad::Var<T> reconstruct(const EncoderInputs<T>& in) const { return decoder_.decode(encoder_.encode(in)); }

  /// Value-only reconstructions, one image per bundle.
  std::vector<RGBImage<T>> reconstruct(const std::vector<DescriptorBundle<T>>& bundles) const {
    ad::NoGradGuard guard;
    const auto out = reconstruct(encoder_inputs(bundles)).value();
    const auto h = out.dim(1), w = out.dim(2);
    std::vector<RGBImage<T>> images;
    for (std::size_t b = 0; b < bundles.size(); ++b) {
      RGBImage<T> img(h, w);
      std::copy(out.data() + b * h * w * 3, out.data() + (b + 1) * h * w * 3, img.pixels.data());
      images.push_back(std::move(img));
    }
    return images;
  }

  RGBImage<T> reconstruct(const DescriptorBundle<T>& bundle) const { return reconstruct(std::vector{bundle})[0]; }

 private:
  ModelConfig config_;
  nn::ParamStore<T> params_;
  std::mt19937_64 rng_;
  ConditionedEncoder<T> encoder_;
  LightDecoder<T> decoder_;
};

}  // namespace vsplit
