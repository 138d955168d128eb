#pragma once

// Descriptor-conditioned transformer encoder: patch tokens from the edge map
// and rendered colour segmentation, conditioned on the grey-level histogram
// through AdaLN-Zero blocks and cross-attention blocks.

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <vector>

#include "visualsplit/descriptors.hpp"
#include "visualsplit/nn.hpp"

namespace vsplit {

enum class BlockKind { adaln, crossattn };

NLOHMANN_JSON_SERIALIZE_ENUM(BlockKind, {{BlockKind::adaln, "adaln_block"}, {BlockKind::crossattn, "crossattn_block"}})

inline std::vector<BlockKind> alternating_blocks(std::size_t depth) {
  std::vector<BlockKind> p(depth);
  for (std::size_t i = 0; i < depth; ++i) p[i] = i % 2 == 0 ? BlockKind::adaln : BlockKind::crossattn;
  return p;
}

/// Colour channels are divided by this before patch embedding so that all
/// three input channels are of order one.
inline constexpr double kAbInputScale = kAbScale;

struct EncoderConfig {
  std::size_t patch_size = 16;
  std::size_t embed_dim = 384;
  std::size_t depth = 8;
  std::size_t num_heads = 6;
  std::size_t hist_token_count = 8;
  std::size_t hist_bins = 100;
  std::size_t mlp_ratio = 4;
  std::vector<BlockKind> block_pattern = alternating_blocks(8);

  void validate() const {
    if (patch_size == 0) throw ConfigError("patch_size must be positive");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim must be a positive multiple of num_heads");
    }
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4 for the 2-D positional encoding");
    if (hist_token_count == 0) throw ConfigError("hist_token_count must be positive");
    if (hist_bins < 2) throw ConfigError("hist_bins must be >= 2");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (block_pattern.size() != depth) throw ConfigError("block_pattern length must equal depth");
    bool has_adaln = false, has_cross = false;
    for (auto k : block_pattern) (k == BlockKind::adaln ? has_adaln : has_cross) = true;
    if (!has_adaln || !has_cross) throw ConfigError("block_pattern needs at least one block of each kind");
  }

  void validate_input(std::size_t height, std::size_t width) const {
    if (height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0) {
      throw ShapeError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                       " is not divisible by patch size " + std::to_string(patch_size));
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
       {"depth", c.depth},           {"num_heads", c.num_heads},
       {"hist_token_count", c.hist_token_count}, {"hist_bins", c.hist_bins},
       {"mlp_ratio", c.mlp_ratio},   {"block_pattern", c.block_pattern}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.hist_token_count = j.value("hist_token_count", d.hist_token_count);
  c.hist_bins = j.value("hist_bins", d.hist_bins);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.block_pattern = j.contains("block_pattern") ? j.at("block_pattern").get<std::vector<BlockKind>>()
                                                : alternating_blocks(c.depth);
}

/// Gather indices turning an image [B,H,W,C] into patch rows
/// [B·(H/p)·(W/p), p·p·C]; patches in raster order, pixels (row, col, channel).
inline std::vector<std::size_t> patch_indices(std::size_t batch, std::size_t h, std::size_t w, std::size_t c,
                                              std::size_t p) {
  const std::size_t gh = h / p, gw = w / p;
  std::vector<std::size_t> idx;
  idx.reserve(batch * h * w * c);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              idx.push_back(((b * h + gy * p + py) * w + gx * p + px) * c + ch);
  return idx;
}

/// The 3-channel encoder input map (edge, a, b) [H,W,3]. Built from
/// descriptor fields only.
template <class T>
Tensor<T> encoder_input_map(const EdgeMap<T>& edges, const SegmentationRender<T>& render) {
  const auto h = edges.magnitude.dim(0), w = edges.magnitude.dim(1);
  if (render.ab_render.shape() != Shape{h, w, 2}) {
    throw ShapeError("edge map " + to_string(edges.magnitude.shape()) + " and colour render " +
                     to_string(render.ab_render.shape()) + " differ in size");
  }
  Tensor<T> out({h, w, 3});
  for (std::size_t p = 0; p < h * w; ++p) {
    out[3 * p] = edges.magnitude[p];
    out[3 * p + 1] = static_cast<T>(render.ab_render[2 * p] / kAbInputScale);
    out[3 * p + 2] = static_cast<T>(render.ab_render[2 * p + 1] / kAbInputScale);
  }
  return out;
}

/// Batched encoder inputs: maps [B,H,W,3] and histogram weights [B,bins].
template <class T>
struct EncoderInputs {
  Tensor<T> maps;
  Tensor<T> histograms;
  std::size_t batch() const { return maps.dim(0); }
};

template <class T>
EncoderInputs<T> encoder_inputs(const std::vector<DescriptorBundle<T>>& bundles) {
  if (bundles.empty()) throw ShapeError("empty bundle batch");
  const auto h = bundles[0].height(), w = bundles[0].width(), bins = bundles[0].histogram.num_bins();
  EncoderInputs<T> in{Tensor<T>({bundles.size(), h, w, 3}), Tensor<T>({bundles.size(), bins})};
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    const auto& bd = bundles[b];
    if (bd.height() != h || bd.width() != w || bd.histogram.num_bins() != bins) {
      throw ShapeError("bundles in a batch must share size and bin count");
    }
    const auto map = encoder_input_map(bd.edges, render_segmentation(bd.segmentation));
    std::copy(map.values().begin(), map.values().end(), in.maps.data() + b * map.size());
    std::copy(bd.histogram.weights.values().begin(), bd.histogram.weights.values().end(),
              in.histograms.data() + b * bins);
  }
  return in;
}

/// Global representation [B, D] and local grid [B·gh·gw, D].
template <class T>
struct EncodedRepresentation {
  ad::Var<T> global_rep;
  ad::Var<T> local_reps;
  std::size_t batch = 0, grid_h = 0, grid_w = 0;
};

template <class T>
class AdaLNBlock {
 public:
  static constexpr std::size_t kShift1 = 0, kScale1 = 1, kGate1 = 2, kShift2 = 3, kScale2 = 4, kGate2 = 5;

  AdaLNBlock(nn::ParamStore<T>& store, const std::string& name, const EncoderConfig& c, std::mt19937_64& rng)
      : attn_(store, name + "/attn", c.embed_dim, c.num_heads, rng),
        mlp_(store, name + "/mlp", c.embed_dim, c.embed_dim * c.mlp_ratio, rng),
        modulation_(store, name + "/modulation", c.embed_dim, 6 * c.embed_dim, rng, nn::Init::zeros),
        dim_(c.embed_dim) {}

  /// x [B·S, D]; cond [B, D] (already passed through SiLU).
  ad::Var<T> operator()(const ad::Var<T>& x, const ad::Var<T>& cond, std::size_t batch) const {
    const auto s = x.dim(0) / batch;
    const auto mod = modulation_(cond);
    auto part = [&](std::size_t i) { return nn::columns(mod, i * dim_, dim_); };
    const ad::Var<T> none;
    auto h = ad::modulate(ad::layer_norm(x, none, none), part(kScale1), part(kShift1), s);
    auto y = ad::gated_add(x, attn_(h, batch), part(kGate1), s);
    h = ad::modulate(ad::layer_norm(y, none, none), part(kScale2), part(kShift2), s);
    return ad::gated_add(y, mlp_(h), part(kGate2), s);
  }

  const nn::Linear<T>& modulation() const { return modulation_; }

 private:
  nn::Attention<T> attn_;
  nn::Mlp<T> mlp_;
  nn::Linear<T> modulation_;
  std::size_t dim_;
};

template <class T>
class CrossAttnBlock {
 public:
  CrossAttnBlock(nn::ParamStore<T>& store, const std::string& name, const EncoderConfig& c, std::mt19937_64& rng)
      : norm1_(store, name + "/norm1", c.embed_dim),
        attn_(store, name + "/attn", c.embed_dim, c.num_heads, rng),
        norm2_(store, name + "/norm2", c.embed_dim),
        norm_kv_(store, name + "/norm_kv", c.embed_dim),
        cross_(store, name + "/cross", c.embed_dim, c.num_heads, rng),
        norm3_(store, name + "/norm3", c.embed_dim),
        mlp_(store, name + "/mlp", c.embed_dim, c.embed_dim * c.mlp_ratio, rng) {}

  /// x [B·S, D]; hist_tokens [B·T, D].
  ad::Var<T> operator()(const ad::Var<T>& x, const ad::Var<T>& hist_tokens, std::size_t batch) const {
    auto y = ad::add(x, attn_(norm1_(x), batch));
    y = ad::add(y, cross_(norm2_(y), norm_kv_(hist_tokens), batch));
    return ad::add(y, mlp_(norm3_(y)));
  }

  const nn::Attention<T>& cross_attention() const { return cross_; }

 private:
  nn::LayerNorm<T> norm1_;
  nn::Attention<T> attn_;
  nn::LayerNorm<T> norm2_, norm_kv_;
  nn::Attention<T> cross_;
  nn::LayerNorm<T> norm3_;
  nn::Mlp<T> mlp_;
};

template <class T>
class ConditionedEncoder {
 public:
  ConditionedEncoder(nn::ParamStore<T>& store, const EncoderConfig& config, std::mt19937_64& rng,
                     const std::string& prefix = "encoder")
      : config_(config) {
    config_.validate();
    const auto d = config_.embed_dim, p = config_.patch_size;
    patch_embed_ = nn::Linear<T>(store, prefix + "/patch_embed", p * p * 3, d, rng);
    global_token_ = store.add(prefix + "/global_token", nn::normal_init<T>({1, d}, 0.02, rng), false);
    hist_fc1_ = nn::Linear<T>(store, prefix + "/hist_mlp/fc1", config_.hist_bins, d, rng);
    hist_fc2_ = nn::Linear<T>(store, prefix + "/hist_mlp/fc2", d, d, rng);
    hist_tokens_ = nn::Linear<T>(store, prefix + "/hist_tokens", config_.hist_bins, config_.hist_token_count * d, rng);
    hist_index_ = store.add(prefix + "/hist_token_index", nn::normal_init<T>({config_.hist_token_count, d}, 0.02, rng),
                            false);
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const auto name = prefix + "/blocks/" + std::to_string(i);
      if (config_.block_pattern[i] == BlockKind::adaln) {
        adaln_.emplace_back(store, name, config_, rng);
        order_.push_back({BlockKind::adaln, adaln_.size() - 1});
      } else {
        cross_.emplace_back(store, name, config_, rng);
        order_.push_back({BlockKind::crossattn, cross_.size() - 1});
      }
    }
    norm_ = nn::LayerNorm<T>(store, prefix + "/norm", d);
  }

  const EncoderConfig& config() const { return config_; }

  /// Patch tokens [B·gh·gw, D] including positional encodings, from maps [B,H,W,3].
  ad::Var<T> patchify(const ad::Var<T>& maps) const {
    if (maps.shape().size() != 4 || maps.dim(3) != 3) throw ShapeError("encoder input must be [B,H,W,3]");
    const auto b = maps.dim(0), h = maps.dim(1), w = maps.dim(2), p = config_.patch_size;
    config_.validate_input(h, w);
    const auto n = b * (h / p) * (w / p);
    auto patches = ad::gather(maps, patch_indices(b, h, w, 3, p), {n, p * p * 3});
    return ad::add(patch_embed_(patches), ad::constant(tiled_positions(b, h / p, w / p)));
  }

  /// Histogram tokens [B·T, D] from weights [B, bins].
  ad::Var<T> tokenize_histogram(const ad::Var<T>& hist) const {
    const auto b = check_hist(hist), t = config_.hist_token_count, d = config_.embed_dim;
    auto tokens = ad::reshape(hist_tokens_(scaled(hist)), {b * t, d});
    std::vector<std::size_t> idx(b * t * d);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % (t * d);
    return ad::add(tokens, ad::gather(hist_index_, std::move(idx), {b * t, d}));
  }

  /// Conditioning vector [B, D] feeding every AdaLN modulation.
  ad::Var<T> conditioning(const ad::Var<T>& hist) const {
    check_hist(hist);
    return ad::silu(hist_fc2_(ad::gelu(hist_fc1_(scaled(hist)))));
  }

  /// Prepends the global token: [B·S, D] → [B·(S+1), D].
  ad::Var<T> with_global_token(const ad::Var<T>& tokens, std::size_t batch) const {
    return nn::prepend_rows(global_token_, tokens, batch);
  }

  /// Runs block `i` of the stack.
  ad::Var<T> run_block(std::size_t i, const ad::Var<T>& x, const ad::Var<T>& cond, const ad::Var<T>& hist_tokens,
                       std::size_t batch) const {
    const auto [kind, slot] = order_.at(i);
    return kind == BlockKind::adaln ? adaln_[slot](x, cond, batch) : cross_[slot](x, hist_tokens, batch);
  }

  EncodedRepresentation<T> encode(const ad::Var<T>& maps, const ad::Var<T>& hist) const {
    const auto b = maps.dim(0);
    if (hist.dim(0) != b) throw ShapeError("histogram batch does not match map batch");
    auto x = with_global_token(patchify(maps), b);
    const auto cond = conditioning(hist);
    const auto tokens = tokenize_histogram(hist);
    for (std::size_t i = 0; i < order_.size(); ++i) x = run_block(i, x, cond, tokens, b);
    auto [global, local] = nn::split_first_row(norm_(x), b);
    return {global, local, b, maps.dim(1) / config_.patch_size, maps.dim(2) / config_.patch_size};
  }

  EncodedRepresentation<T> encode(const EncoderInputs<T>& in) const {
    return encode(ad::constant(in.maps), ad::constant(in.histograms));
  }

  const std::vector<AdaLNBlock<T>>& adaln_blocks() const { return adaln_; }
  const std::vector<CrossAttnBlock<T>>& crossattn_blocks() const { return cross_; }

 private:
  std::size_t check_hist(const ad::Var<T>& hist) const {
    if (hist.shape().size() != 2 || hist.dim(1) != config_.hist_bins) {
      throw ShapeError("histogram input must be [B," + std::to_string(config_.hist_bins) + "], got " +
                       to_string(hist.shape()));
    }
    return hist.dim(0);
  }

  // Bin weights average 1/bins; rescale so the input has unit mean.
  ad::Var<T> scaled(const ad::Var<T>& hist) const { return ad::scale(hist, static_cast<T>(config_.hist_bins)); }

  Tensor<T> tiled_positions(std::size_t batch, std::size_t gh, std::size_t gw) const {
    const auto table = nn::sincos_position_table<T>(gh, gw, config_.embed_dim);
    Tensor<T> out({batch * gh * gw, config_.embed_dim});
    for (std::size_t b = 0; b < batch; ++b) std::copy(table.values().begin(), table.values().end(), out.data() + b * table.size());
    return out;
  }

  EncoderConfig config_;
  nn::Linear<T> patch_embed_;
  ad::Var<T> global_token_;
  nn::Linear<T> hist_fc1_, hist_fc2_, hist_tokens_;
  ad::Var<T> hist_index_;
  std::vector<AdaLNBlock<T>> adaln_;
  std::vector<CrossAttnBlock<T>> cross_;
  std::vector<std::pair<BlockKind, std::size_t>> order_;
  nn::LayerNorm<T> norm_;
};

}  // namespace vsplit
