#pragma once

// Differentiable tensor primitives. Each op computes its value eagerly and
// registers a hand-written backward pass with the autodiff graph.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "visualsplit/autodiff.hpp"

namespace vsplit::ad {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const T* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return record<T>(std::move(out), {a}, [a, df](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    const T* x = a.data();
    const T* y = o.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return record<T>(std::move(out), {a, b}, [a, b](Node<T>& o) {
    for (const auto* in : {&a, &b}) {
      if (!in->requires_grad()) continue;
      auto g = in->node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return record<T>(std::move(out), {a, b}, [a, b](Node<T>& o) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (b.requires_grad()) {
      auto g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return record<T>(std::move(out), {a, b}, [a, b](Node<T>& o) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a.data()[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return record<T>(std::move(out), {a, b}, [a, b](Node<T>& o) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / b.data()[i];
    }
    if (b.requires_grad()) {
      auto g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * o.value[i] / b.data()[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

/// Subgradient 0 at the kink.
template <class T>
Var<T> abs(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::abs(x); },
                       [](T x, T) { return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0}); });
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T{0.5} / y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T{1} / (T{1} + std::exp(-x)); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T{1} + std::exp(-x)); },
      [](T x, T) {
        T s = T{1} / (T{1} + std::exp(-x));
        return s * (T{1} + x * (T{1} - s));
      });
}

/// tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a, [](T x) { return T{0.5} * x * (T{1} + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        T t = std::tanh(c * (x + k * x * x * x));
        return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * c * (T{1} + T{3} * k * x * x);
      });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  return record<T>(Tensor<T>({1}, {s}), {a}, [a](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.size());
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  return record<T>(Tensor<T>({1}, {s / n}), {a}, [a, n](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    for (auto& v : g) v += o.grad[0] / n;
  });
}

/// Weighted sum of scalar Vars; used to combine loss terms.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  T s{0};
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  return record<T>(Tensor<T>({1}, {s}), terms, [terms, weights](Node<T>& o) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (terms[i].requires_grad()) terms[i].node()->grad_buffer()[0] += weights[i] * o.grad[0];
    }
  });
}

// ---------------------------------------------------------------- layout

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return record<T>(std::move(out), {a}, [a](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

/// out[i] = a[index[i]]; repeated indices accumulate on the way back.
template <class T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (numel(shape) != index->size()) throw ShapeError("gather: index count does not match output shape");
  Tensor<T> out(std::move(shape));
  const T* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*index)[i]];
  return record<T>(std::move(out), {a}, [a, index](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += o.grad[i];
  });
}

template <class T>
Var<T> gather(const Var<T>& a, std::vector<std::size_t> index, Shape shape) {
  return gather(a, std::make_shared<const std::vector<std::size_t>>(std::move(index)), std::move(shape));
}

/// Contiguous sub-block starting at flat `offset`.
template <class T>
Var<T> slice(const Var<T>& a, std::size_t offset, Shape shape) {
  const std::size_t n = numel(shape);
  if (offset + n > a.size()) throw ShapeError("slice: range exceeds tensor");
  Tensor<T> out(std::move(shape));
  std::copy_n(a.data() + offset, n, out.data());
  return record<T>(std::move(out), {a}, [a, offset](Node<T>& o) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[offset + i] += o.grad[i];
  });
}

/// Flat concatenation of all inputs.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  Tensor<T> out({total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.size(), out.data() + off);
    off += p.size();
  }
  return record<T>(std::move(out), parts, [parts](Node<T>& o) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto g = p.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
      }
      off += p.size();
    }
  });
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out({m, n});
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data(), m, k) * ConstMatMap<T>(b.data(), k, n);
  return record<T>(std::move(out), {a, b}, [a, b, m, k, n](Node<T>& o) {
    ConstMatMap<T> dy(o.grad.data(), m, n);
    if (a.requires_grad()) {
      MatMap<T>(a.node()->grad_buffer().data(), m, k).noalias() += dy * ConstMatMap<T>(b.data(), k, n).transpose();
    }
    if (b.requires_grad()) {
      MatMap<T>(b.node()->grad_buffer().data(), k, n).noalias() += ConstMatMap<T>(a.data(), m, k).transpose() * dy;
    }
  });
}

/// y = x·W + b with x [N,in], W [in,out], b [out] (b may be undefined).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  const auto n = x.dim(0), in = x.dim(1), outd = w.dim(1);
  if (w.dim(0) != in) throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " + to_string(w.shape()));
  Tensor<T> out({n, outd});
  MatMap<T> y(out.data(), n, outd);
  y.noalias() = ConstMatMap<T>(x.data(), n, in) * ConstMatMap<T>(w.data(), in, outd);
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), outd);
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return record<T>(std::move(out), inputs, [x, w, b, n, in, outd](Node<T>& o) {
    ConstMatMap<T> dy(o.grad.data(), n, outd);
    if (x.requires_grad()) {
      MatMap<T>(x.node()->grad_buffer().data(), n, in).noalias() += dy * ConstMatMap<T>(w.data(), in, outd).transpose();
    }
    if (w.requires_grad()) {
      MatMap<T>(w.node()->grad_buffer().data(), in, outd).noalias() += ConstMatMap<T>(x.data(), n, in).transpose() * dy;
    }
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.node()->grad_buffer().data(), outd) += dy.colwise().sum();
    }
  });
}

/// x [N,D] + row [D] broadcast over rows.
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  const auto d = row.size();
  if (x.size() % d != 0 || x.shape().back() != d) throw ShapeError("add_row: trailing dimension mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + row.data()[i % d];
  return record<T>(std::move(out), {x, row}, [x, row, d](Node<T>& o) {
    if (x.requires_grad()) {
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (row.requires_grad()) {
      auto g = row.node()->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
    }
  });
}

/// Layer normalisation over the last axis; gamma/beta optional.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  const auto d = x.shape().back();
  const auto rows = x.size() / d;
  auto xhat = std::make_shared<Buffer<T>>(x.size());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      T v = h;
      if (gamma.defined()) v *= gamma.data()[j];
      if (beta.defined()) v += beta.data()[j];
      out[r * d + j] = v;
    }
  }
  std::vector<Var<T>> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  return record<T>(std::move(out), inputs, [x, gamma, beta, xhat, rstd, d, rows](Node<T>& o) {
    std::vector<T> dh(d);
    T* gg = (gamma.defined() && gamma.requires_grad()) ? gamma.node()->grad_buffer().data() : nullptr;
    T* gb = (beta.defined() && beta.requires_grad()) ? beta.node()->grad_buffer().data() : nullptr;
    T* gx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = o.grad.data() + r * d;
      const T* h = xhat->data() + r * d;
      T mean_dh{0}, mean_dh_h{0};
      for (std::size_t j = 0; j < d; ++j) {
        if (gg) gg[j] += dy[j] * h[j];
        if (gb) gb[j] += dy[j];
        dh[j] = gamma.defined() ? dy[j] * gamma.data()[j] : dy[j];
        mean_dh += dh[j];
        mean_dh_h += dh[j] * h[j];
      }
      if (!gx) continue;
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (*rstd)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
    }
  });
}

/// x·(1+scale) + shift where x has `group_rows` consecutive rows per group
/// and scale/shift hold one row per group.
template <class T>
Var<T> modulate(const Var<T>& x, const Var<T>& scale_, const Var<T>& shift, std::size_t group_rows) {
  const auto d = x.shape().back();
  const auto rows = x.size() / d;
  if (rows != scale_.dim(0) * group_rows || scale_.shape() != shift.shape() || scale_.dim(1) != d) {
    throw ShapeError("modulate: group layout mismatch");
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t g = r / group_rows;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = x.data()[r * d + j] * (T{1} + scale_.data()[g * d + j]) + shift.data()[g * d + j];
    }
  }
  return record<T>(std::move(out), {x, scale_, shift}, [x, scale_, shift, d, rows, group_rows](Node<T>& o) {
    T* gx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
    T* gs = scale_.requires_grad() ? scale_.node()->grad_buffer().data() : nullptr;
    T* gb = shift.requires_grad() ? shift.node()->grad_buffer().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t g = r / group_rows;
      for (std::size_t j = 0; j < d; ++j) {
        const T dy = o.grad[r * d + j];
        if (gx) gx[r * d + j] += dy * (T{1} + scale_.data()[g * d + j]);
        if (gs) gs[g * d + j] += dy * x.data()[r * d + j];
        if (gb) gb[g * d + j] += dy;
      }
    }
  });
}

/// x + gate ⊙ y with per-group gate rows (same layout as modulate).
template <class T>
Var<T> gated_add(const Var<T>& x, const Var<T>& y, const Var<T>& gate, std::size_t group_rows) {
  detail::require_same(x.shape(), y.shape(), "gated_add");
  const auto d = x.shape().back();
  const auto rows = x.size() / d;
  if (rows != gate.dim(0) * group_rows || gate.dim(1) != d) throw ShapeError("gated_add: group layout mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t g = r / group_rows;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + gate.data()[g * d + j] * y.data()[r * d + j];
  }
  return record<T>(std::move(out), {x, y, gate}, [x, y, gate, d, rows, group_rows](Node<T>& o) {
    T* gx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
    T* gy = y.requires_grad() ? y.node()->grad_buffer().data() : nullptr;
    T* gg = gate.requires_grad() ? gate.node()->grad_buffer().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t g = r / group_rows;
      for (std::size_t j = 0; j < d; ++j) {
        const T dy = o.grad[r * d + j];
        if (gx) gx[r * d + j] += dy;
        if (gy) gy[r * d + j] += dy * gate.data()[g * d + j];
        if (gg) gg[g * d + j] += dy * y.data()[r * d + j];
      }
    }
  });
}

/// Multi-head scaled dot-product attention. q is [batch·Sq, D], k and v are
/// [batch·Sk, D]; each batch item attends only within its own rows.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t heads) {
  const auto d = q.shape().back();
  if (d % heads != 0) throw ShapeError("attention: width not divisible by head count");
  if (k.shape() != v.shape() || k.shape().back() != d) throw ShapeError("attention: key/value shape mismatch");
  const auto sq = q.dim(0) / batch, sk = k.dim(0) / batch;
  if (sq * batch != q.dim(0) || sk * batch != k.dim(0)) throw ShapeError("attention: rows not divisible by batch");
  const auto dh = d / heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<Buffer<T>>(batch * heads * sq * sk);
  Tensor<T> out(q.shape());
  RowMatrix<T> s(sq, sk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> qm(q.data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> km(k.data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> vm(v.data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
      s.noalias() = (qm * km.transpose()) * sc;
      MatMap<T> p(probs->data() + (b * heads + h) * sq * sk, sq, sk);
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        p.row(i) = (s.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
      StridedMap<T>(out.data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d)).noalias() = p * vm;
    }
  }
  return record<T>(std::move(out), {q, k, v}, [q, k, v, probs, batch, heads, sq, sk, d, dh, sc](Node<T>& o) {
    RowMatrix<T> dp(sq, sk), ds(sq, sk);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstStridedMap<T> dout(o.grad.data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d));
        ConstStridedMap<T> qm(q.data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d));
        ConstStridedMap<T> km(k.data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
        ConstStridedMap<T> vm(v.data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
        ConstMatMap<T> p(probs->data() + (b * heads + h) * sq * sk, sq, sk);
        if (v.requires_grad()) {
          StridedMap<T>(v.node()->grad_buffer().data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d)).noalias() +=
              p.transpose() * dout;
        }
        if (!q.requires_grad() && !k.requires_grad()) continue;
        dp.noalias() = dout * vm.transpose();
        for (Eigen::Index i = 0; i < dp.rows(); ++i) {
          const T dot = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        if (q.requires_grad()) {
          StridedMap<T>(q.node()->grad_buffer().data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d)).noalias() +=
              (ds * km) * sc;
        }
        if (k.requires_grad()) {
          StridedMap<T>(k.node()->grad_buffer().data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d)).noalias() +=
              (ds.transpose() * qm) * sc;
        }
      }
    }
  });
}

/// 2-D convolution, x [C,H,W], w [O,C,k,k], b [O]; zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  detail::require_rank(x.shape(), 3, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d");
  const auto c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto oc = w.dim(0), ks = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != ks) throw ShapeError("conv2d: weight shape mismatch");
  if (h + 2 * pad < ks || wd + 2 * pad < ks) throw ShapeError("conv2d: input smaller than kernel");
  const auto oh = (h + 2 * pad - ks) / stride + 1, ow = (wd + 2 * pad - ks) / stride + 1;
  const auto rows = c * ks * ks, cols_n = oh * ow;
  // column index of each (row, col) entry in x, or npos for padding
  auto src = std::make_shared<std::vector<std::size_t>>(rows * cols_n);
  constexpr auto npos = static_cast<std::size_t>(-1);
  RowMatrix<T> cols(rows, cols_n);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < ks; ++ky)
      for (std::size_t kx = 0; kx < ks; ++kx) {
        const std::size_t r = (ci * ks + ky) * ks + kx;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const std::size_t col = oy * ow + ox;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd)) {
              (*src)[r * cols_n + col] = npos;
              cols(r, col) = T{0};
            } else {
              const auto idx = (ci * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix);
              (*src)[r * cols_n + col] = idx;
              cols(r, col) = x.data()[idx];
            }
          }
      }
  Tensor<T> out({oc, oh, ow});
  MatMap<T> y(out.data(), oc, cols_n);
  y.noalias() = ConstMatMap<T>(w.data(), oc, rows) * cols;
  if (b.defined()) y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), oc);
  auto saved = std::make_shared<RowMatrix<T>>(std::move(cols));
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return record<T>(std::move(out), inputs, [x, w, b, saved, src, oc, rows, cols_n](Node<T>& o) {
    ConstMatMap<T> dy(o.grad.data(), oc, cols_n);
    if (w.requires_grad()) MatMap<T>(w.node()->grad_buffer().data(), oc, rows).noalias() += dy * saved->transpose();
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.node()->grad_buffer().data(), oc) += dy.rowwise().sum();
    }
    if (x.requires_grad()) {
      RowMatrix<T> dcols = ConstMatMap<T>(w.data(), oc, rows).transpose() * dy;
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < src->size(); ++i) {
        if ((*src)[i] != static_cast<std::size_t>(-1)) g[(*src)[i]] += dcols.data()[i];
      }
    }
  });
}

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const auto n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<Buffer<T>>(n * c);
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    const T mx = *std::max_element(z, z + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(z[j] - mx) / s;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw IndexError("cross_entropy: label out of range");
    loss -= z[labels[i]] - mx - std::log(s);
  }
  loss /= static_cast<T>(n);
  return record<T>(Tensor<T>({1}, {loss}), {logits}, [logits, labels, probs, n, c](Node<T>& o) {
    auto g = logits.node()->grad_buffer();
    const T s = o.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += s * ((*probs)[i * c + j] - (static_cast<int>(j) == labels[i] ? T{1} : T{0}));
  });
}

}  // namespace vsplit::ad
