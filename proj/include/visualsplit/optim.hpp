#pragma once

// AdamW with decoupled weight decay and global-norm gradient clipping.

#include <nlohmann/json.hpp>

#include <cmath>
#include <vector>

#include "visualsplit/nn.hpp"

namespace vsplit {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("AdamW betas must lie in [0,1)");
    if (!(eps > 0)) throw ConfigError("AdamW eps must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  }

  bool operator==(const AdamWConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  AdamWConfig d;
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
}

/// Global L2 norm of all parameter gradients (missing gradients count as 0).
template <class T>
double gradient_norm(const nn::ParamStore<T>& params) {
  double s = 0;
  for (const auto& p : params.entries())
    for (T g : p.var.grad()) s += double(g) * double(g);
  return std::sqrt(s);
}

template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::ParamStore<T>& params, AdamWConfig config) : config_(config) {
    config_.validate();
    for (const auto& p : params.entries()) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  const AdamWConfig& config() const { return config_; }
  std::size_t steps() const { return t_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

  /// Applies one update with learning rate `lr`; returns the pre-clip
  /// gradient norm.
  double step(nn::ParamStore<T>& params, double lr) {
    const auto& entries = params.entries();
    if (entries.size() != m_.size()) throw ConfigError("optimizer state does not match the parameter set");
    const double norm = gradient_norm(params);
    const double clip = config_.clip_norm > 0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto var = entries[i].var;
      const auto grad = var.grad();
      if (grad.empty()) continue;
      auto& w = var.mutable_value();
      const double decay = entries[i].decay ? config_.weight_decay : 0.0;
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = double(grad[j]) * clip;
        m[j] = static_cast<T>(b1 * double(m[j]) + (1 - b1) * g);
        v[j] = static_cast<T>(b2 * double(v[j]) + (1 - b2) * g * g);
        const double mh = double(m[j]) / c1, vh = double(v[j]) / c2;
        const double update = mh / (std::sqrt(vh) + config_.eps) + decay * double(w[j]);
        w[j] = static_cast<T>(double(w[j]) - lr * update);
      }
    }
    return norm;
  }

 private:
  AdamWConfig config_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace vsplit
