#pragma once

// Parameter store and the transformer building blocks shared by the
// encoder and decoder.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "visualsplit/ops.hpp"

namespace vsplit::nn {

template <class T>
struct NamedParameter {
  std::string name;
  ad::Var<T> var;
  bool decay;  // subject to weight decay
};

/// Ordered registry of every trainable array in a model.
template <class T>
class ParamStore {
 public:
  ad::Var<T> add(std::string name, Tensor<T> init, bool decay) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name " + name);
    }
    auto v = ad::parameter(std::move(init));
    params_.push_back({std::move(name), v, decay});
    return v;
  }

  const std::vector<NamedParameter<T>>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  const NamedParameter<T>* find(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  /// Scalar count, optionally restricted to names starting with `prefix`.
  std::size_t count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.name.starts_with(prefix)) n += p.var.size();
    }
    return n;
  }

  void zero_grad() const {
    for (const auto& p : params_) p.var.zero_grad();
  }

  /// FNV-1a over names and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& p : params_) {
      mix(p.name.data(), p.name.size());
      mix(p.var.data(), p.var.size() * sizeof(T));
    }
    return h;
  }

  /// Adds N(0, stddev²) noise to every parameter (used to leave the
  /// zero-initialised regime in tests and ablations).
  void perturb(std::uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      for (auto& v : p.var.mutable_value().values()) v += static_cast<T>(std::normal_distribution<double>(0, stddev)(rng));
    }
  }

 private:
  std::vector<NamedParameter<T>> params_;
};

template <class T>
Tensor<T> xavier_uniform(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor<T> w({in, out});
  for (auto& v : w.values()) v = static_cast<T>(std::uniform_real_distribution<double>(-a, a)(rng));
  return w;
}

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> w(std::move(shape));
  for (auto& v : w.values()) v = static_cast<T>(std::normal_distribution<double>(0, stddev)(rng));
  return w;
}

enum class Init { xavier, zeros };

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         Init init = Init::xavier)
      : weight_(store.add(name + "/weight", init == Init::zeros ? Tensor<T>({in, out}) : xavier_uniform<T>(in, out, rng),
                          true)),
        bias_(store.add(name + "/bias", Tensor<T>({out}), false)) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, weight_, bias_); }
  const ad::Var<T>& weight() const { return weight_; }
  const ad::Var<T>& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }

 private:
  ad::Var<T> weight_, bias_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim)
      : gamma_(store.add(name + "/gamma", Tensor<T>({dim}, T{1}), false)),
        beta_(store.add(name + "/beta", Tensor<T>({dim}), false)) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::layer_norm(x, gamma_, beta_); }

 private:
  ad::Var<T> gamma_, beta_;
};

/// Multi-head attention with separate query/key/value/output projections.
template <class T>
class Attention {
 public:
  Attention() = default;
  Attention(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads, std::mt19937_64& rng)
      : q_(store, name + "/q", dim, dim, rng),
        k_(store, name + "/k", dim, dim, rng),
        v_(store, name + "/v", dim, dim, rng),
        o_(store, name + "/o", dim, dim, rng),
        heads_(heads) {
    if (dim % heads != 0) throw ConfigError("attention width must be divisible by head count");
  }

  /// Queries from `x` ([batch·Sq, D]); keys/values from `context` ([batch·Sk, D]).
  ad::Var<T> operator()(const ad::Var<T>& x, const ad::Var<T>& context, std::size_t batch) const {
    return o_(ad::attention(q_(x), k_(context), v_(context), batch, heads_));
  }
  ad::Var<T> operator()(const ad::Var<T>& x, std::size_t batch) const { return (*this)(x, x, batch); }

  const Linear<T>& query() const { return q_; }
  const Linear<T>& key() const { return k_; }
  const Linear<T>& value() const { return v_; }
  const Linear<T>& output() const { return o_; }

 private:
  Linear<T> q_, k_, v_, o_;
  std::size_t heads_ = 1;
};

template <class T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
      : fc1_(store, name + "/fc1", dim, hidden, rng), fc2_(store, name + "/fc2", hidden, dim, rng) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const { return fc2_(ad::gelu(fc1_(x))); }

 private:
  Linear<T> fc1_, fc2_;
};

/// Fixed 2-D sine/cosine position table [grid_h·grid_w, dim]; half of the
/// channels encode the row, half the column.
template <class T>
Tensor<T> sincos_position_table(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  if (dim % 4 != 0) throw ConfigError("positional encoding width must be divisible by 4");
  const std::size_t quarter = dim / 4;
  Tensor<T> table({grid_h * grid_w, dim});
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      T* row = table.data() + (gy * grid_w + gx) * dim;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = static_cast<T>(std::sin(gy * omega));
        row[quarter + i] = static_cast<T>(std::cos(gy * omega));
        row[2 * quarter + i] = static_cast<T>(std::sin(gx * omega));
        row[3 * quarter + i] = static_cast<T>(std::cos(gx * omega));
      }
    }
  return table;
}

/// Columns [first, first+width) of a [N, C] variable.
template <class T>
ad::Var<T> columns(const ad::Var<T>& x, std::size_t first, std::size_t width) {
  const auto n = x.dim(0), c = x.dim(1);
  std::vector<std::size_t> idx(n * width);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < width; ++j) idx[r * width + j] = r * c + first + j;
  return ad::gather(x, std::move(idx), {n, width});
}

/// Prepends one context row per batch item: rows [batch, D] and tokens
/// [batch·S, D] become [batch·(S+1), D] with the context row first.
template <class T>
ad::Var<T> prepend_rows(const ad::Var<T>& first, const ad::Var<T>& tokens, std::size_t batch) {
  const auto d = tokens.dim(1);
  const auto s = tokens.dim(0) / batch;
  const bool shared = first.dim(0) == 1;  // a single learned row broadcast to every item
  auto joined = ad::concat<T>({first, tokens});
  const std::size_t offset = first.size();
  std::vector<std::size_t> idx(batch * (s + 1) * d);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * (s + 1) * d;
    for (std::size_t j = 0; j < d; ++j) idx[base + j] = (shared ? 0 : b * d) + j;
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t j = 0; j < d; ++j) idx[base + (t + 1) * d + j] = offset + (b * s + t) * d + j;
  }
  return ad::gather(joined, std::move(idx), {batch * (s + 1), d});
}

/// Inverse of prepend_rows: splits [batch·(S+1), D] into ([batch, D], [batch·S, D]).
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> split_first_row(const ad::Var<T>& x, std::size_t batch) {
  const auto d = x.dim(1);
  const auto s1 = x.dim(0) / batch;
  std::vector<std::size_t> head(batch * d), rest(batch * (s1 - 1) * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < d; ++j) head[b * d + j] = b * s1 * d + j;
    for (std::size_t t = 1; t < s1; ++t)
      for (std::size_t j = 0; j < d; ++j) rest[(b * (s1 - 1) + t - 1) * d + j] = (b * s1 + t) * d + j;
  }
  return {ad::gather(x, std::move(head), {batch, d}), ad::gather(x, std::move(rest), {batch * (s1 - 1), d})};
}

}  // namespace vsplit::nn
