#pragma once

// Shallow transformer decoder from encoded representations back to RGB.

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <vector>

#include "visualsplit/encoder.hpp"

namespace vsplit {

struct DecoderConfig {
  std::size_t embed_dim = 192;
  std::size_t depth = 2;
  std::size_t num_heads = 6;
  std::size_t patch_size = 16;
  std::size_t mlp_ratio = 4;

  void validate(const EncoderConfig& encoder) const {
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("decoder embed_dim must be a positive multiple of num_heads");
    }
    if (embed_dim % 4 != 0) throw ConfigError("decoder embed_dim must be divisible by 4");
    if (depth == 0) throw ConfigError("decoder depth must be positive");
    if (depth >= encoder.depth) {
      throw ConfigError("decoder depth " + std::to_string(depth) + " must be below encoder depth " +
                        std::to_string(encoder.depth));
    }
    if (patch_size != encoder.patch_size) throw ConfigError("decoder patch_size must equal the encoder's");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  }

  bool operator==(const DecoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"embed_dim", c.embed_dim}, {"depth", c.depth}, {"num_heads", c.num_heads},
       {"patch_size", c.patch_size}, {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  DecoderConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
}

template <class T>
class DecoderBlock {
 public:
  DecoderBlock(nn::ParamStore<T>& store, const std::string& name, const DecoderConfig& c, std::mt19937_64& rng)
      : norm1_(store, name + "/norm1", c.embed_dim),
        attn_(store, name + "/attn", c.embed_dim, c.num_heads, rng),
        norm2_(store, name + "/norm2", c.embed_dim),
        mlp_(store, name + "/mlp", c.embed_dim, c.embed_dim * c.mlp_ratio, rng) {}

  ad::Var<T> operator()(const ad::Var<T>& x, std::size_t batch) const {
    auto y = ad::add(x, attn_(norm1_(x), batch));
    return ad::add(y, mlp_(norm2_(y)));
  }

 private:
  nn::LayerNorm<T> norm1_;
  nn::Attention<T> attn_;
  nn::LayerNorm<T> norm2_;
  nn::Mlp<T> mlp_;
};

template <class T>
class LightDecoder {
 public:
  LightDecoder(nn::ParamStore<T>& store, const DecoderConfig& config, const EncoderConfig& encoder,
               std::mt19937_64& rng, const std::string& prefix = "decoder")
      : config_(config), encoder_dim_(encoder.embed_dim) {
    config_.validate(encoder);
    const auto d = config_.embed_dim, p = config_.patch_size;
    embed_ = nn::Linear<T>(store, prefix + "/embed", encoder_dim_, d, rng);
    global_embed_ = nn::Linear<T>(store, prefix + "/global_embed", encoder_dim_, d, rng);
    for (std::size_t i = 0; i < config_.depth; ++i) {
      blocks_.emplace_back(store, prefix + "/blocks/" + std::to_string(i), config_, rng);
    }
    norm_ = nn::LayerNorm<T>(store, prefix + "/norm", d);
    pred_ = nn::Linear<T>(store, prefix + "/pred", d, p * p * 3, rng);
  }

  const DecoderConfig& config() const { return config_; }

  /// Reconstruction [B,H,W,3] with values in (0,1).
  ad::Var<T> decode(const EncodedRepresentation<T>& rep) const {
    const auto b = rep.batch, gh = rep.grid_h, gw = rep.grid_w, p = config_.patch_size, d = config_.embed_dim;
    if (rep.global_rep.shape() != Shape{b, encoder_dim_} || rep.local_reps.shape() != Shape{b * gh * gw, encoder_dim_}) {
      throw ShapeError("representation shapes do not match the decoder configuration");
    }
    const auto table = nn::sincos_position_table<T>(gh, gw, d);
    Tensor<T> pos({b * gh * gw, d});
    for (std::size_t i = 0; i < b; ++i) std::copy(table.values().begin(), table.values().end(), pos.data() + i * table.size());
    auto local = ad::add(embed_(rep.local_reps), ad::constant(std::move(pos)));
    auto x = nn::prepend_rows(global_embed_(rep.global_rep), local, b);
    for (const auto& blk : blocks_) x = blk(x, b);
    auto tokens = nn::split_first_row(norm_(x), b).second;
    auto patches = ad::sigmoid(pred_(tokens));  // [B·gh·gw, p·p·3]

    // Fold patches back: invert the patchify permutation.
    const auto h = gh * p, w = gw * p;
    const auto fwd = patch_indices(b, h, w, 3, p);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return ad::gather(patches, std::move(inv), {b, h, w, 3});
  }

 private:
  DecoderConfig config_;
  std::size_t encoder_dim_;
  nn::Linear<T> embed_, global_embed_;
  std::vector<DecoderBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
  nn::Linear<T> pred_;
};

}  // namespace vsplit
