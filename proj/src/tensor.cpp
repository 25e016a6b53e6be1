// SPDX-License-Identifier: Apache-2.0
#include "qelab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace qelab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

[[noreturn]] void dimension_error(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

template <typename T>
void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& out,
            std::function<void()> backward) {
  Tape<T>* tape = g_active_tape<T>;
  if (!tape) return;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!needs) return;
  out.set_requires_grad(true);
  tape->record(op, std::move(inputs), out, std::move(backward));
}

template <typename T>
void check_finite(std::string_view op, std::span<const T> xs) {
  for (T x : xs) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
  }
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : s_(std::make_shared<Storage>()) {
  s_->data.assign(shape_numel(shape), fill);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->data = std::move(values);
  s_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw UsageError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return s_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::ensure_grad() const {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
  return s_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  s_->grad.assign(s_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(s_->shape, s_->data, s_->requires_grad);
  return out;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                     std::function<void()> backward) {
  nodes_.push_back(TapeNode<T>{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  for (auto& node : nodes_) {
    for (auto& in : node.inputs) {
      if (in.requires_grad()) in.ensure_grad();
    }
  }
  Tensor<T> seed = loss;
  seed.ensure_grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active_tape<T> = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(g_active_tape<T>) {
  g_active_tape<T> = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  g_active_tape<T> = previous_;
}

template <typename T>
Tape<T>* active_tape() {
  return g_active_tape<T>;
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    dimension_error("matmul", a.shape(), b.shape());
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  MatMap<T>(out.ptr(), m, n).noalias() = ConstMatMap<T>(a.ptr(), m, k) * ConstMatMap<T>(b.ptr(), k, n);
  record<T>("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
    ConstMatMap<T> dc(out.grad().data(), m, n);
    if (a.requires_grad()) {
      MatMap<T>(a.ensure_grad().data(), m, k).noalias() += dc * ConstMatMap<T>(b.ptr(), k, n).transpose();
    }
    if (b.requires_grad()) {
      MatMap<T>(b.ensure_grad().data(), k, n).noalias() += ConstMatMap<T>(a.ptr(), m, k).transpose() * dc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dimension_error("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  record<T>("add", {a, b}, out, [a, b, out]() mutable {
    auto go = out.grad();
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = t->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    dimension_error("add_bias", x.shape(), bias.shape());
  }
  const std::size_t n = bias.size();
  const std::size_t rows = x.size() / n;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
  }
  record<T>("add_bias", {x, bias}, out, [x, bias, out, rows, n]() mutable {
    auto go = out.grad();
    if (x.requires_grad()) {
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dimension_error("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  record<T>("mul", {a, b}, out, [a, b, out]() mutable {
    auto go = out.grad();
    if (a.requires_grad()) {
      auto g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * b[i];
    }
    if (b.requires_grad()) {
      auto g = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * a[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  record<T>("scale", {x}, out, [x, out, factor]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  record<T>("square", {x}, out, [x, out]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * T(2) * x[i];
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) dimension_error("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  record<T>("reshape", {x}, out, [x, out]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
  }
  check_finite<T>("softmax", x.data());
  const Shape& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  record<T>("softmax", {x}, out, [x, out, outer, inner, n]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += go[base + j * inner] * out[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += out[idx] * (go[idx] - dot);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1 || gamma.shape() != Shape{x.shape().back()} || beta.shape() != gamma.shape()) {
    dimension_error("layer_norm", x.shape(), gamma.shape());
  }
  const std::size_t d = gamma.size();
  if (d < 2) throw DimensionError("layer_norm: normalised axis must have extent >= 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.size() / d;

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T denom = var + eps;
    const T is = denom > T(0) ? T(1) / std::sqrt(denom) : T(0);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  record<T>("layer_norm", {x, gamma, beta}, out,
            [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
              auto go = out.grad();
              if (gamma.requires_grad() || beta.requires_grad()) {
                auto gg = gamma.ensure_grad();
                auto gb = beta.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < d; ++j) {
                    gg[j] += go[r * d + j] * xhat[r * d + j];
                    gb[j] += go[r * d + j];
                  }
                }
              }
              if (!x.requires_grad()) return;
              auto gx = x.ensure_grad();
              for (std::size_t r = 0; r < rows; ++r) {
                T mean_dh = 0, mean_dh_h = 0;
                for (std::size_t j = 0; j < d; ++j) {
                  const T dh = go[r * d + j] * gamma[j];
                  mean_dh += dh;
                  mean_dh_h += dh * xhat[r * d + j];
                }
                mean_dh /= T(d);
                mean_dh_h /= T(d);
                for (std::size_t j = 0; j < d; ++j) {
                  const T dh = go[r * d + j] * gamma[j];
                  gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
  }
  record<T>("gelu", {x}, out, [x, out]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += go[i] * (cdf + v * pdf);
    }
  });
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  record<T>("tanh", {x}, out, [x, out]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * (T(1) - out[i] * out[i]);
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  record<T>("sum", {x}, out, [x, out]() mutable {
    const T go = out.grad()[0];
    auto g = x.ensure_grad();
    for (auto& v : g) v += go;
  });
  return out;
}

template <typename T>
Tensor<T> l1_norm(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += std::abs(v);
  Tensor<T> out = Tensor<T>::scalar(total);
  record<T>("l1_norm", {x}, out, [x, out]() mutable {
    const T go = out.grad()[0];
    auto g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      g[i] += go * (v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)));
    }
  });
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape lead_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (shape_numel(lead_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids do not fill " + shape_str(lead_shape));
  }
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  Shape out_shape = std::move(lead_shape);
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw UsageError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(table.ptr() + ids[i] * d, d, out.ptr() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  record<T>("embedding", {table}, out, [table, out, saved = std::move(saved), d]() mutable {
    auto go = out.grad();
    auto g = table.ensure_grad();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += go[i * d + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int32_t> index, std::size_t k) {
  if (x.rank() != 3 || index.size() != x.dim(0) * k) {
    dimension_error("gather_rows", x.shape(), Shape{index.size()});
  }
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  Tensor<T> out(Shape{b, k, d});
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto src = index[r * k + i];
      if (src < 0 || static_cast<std::size_t>(src) >= s) {
        throw UsageError("gather_rows: position " + std::to_string(src) + " outside sequence of " + std::to_string(s));
      }
      std::copy_n(x.ptr() + (r * s + src) * d, d, out.ptr() + (r * k + i) * d);
    }
  }
  std::vector<std::int32_t> saved(index.begin(), index.end());
  record<T>("gather_rows", {x}, out, [x, out, saved = std::move(saved), b, s, d, k]() mutable {
    auto go = out.grad();
    auto g = x.ensure_grad();
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t src = (r * s + saved[r * k + i]) * d;
        for (std::size_t j = 0; j < d; ++j) g[src + j] += go[(r * k + i) * d + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slot_scale(const Tensor<T>& x, const Tensor<T>& factors, std::span<const std::int32_t> slot) {
  if (x.rank() != 3 || factors.rank() != 1 || slot.size() != x.dim(0) * x.dim(1)) {
    dimension_error("slot_scale", x.shape(), factors.shape());
  }
  const std::size_t rows = slot.size();
  const std::size_t d = x.dim(2);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto sl = slot[r];
    if (sl >= 0 && static_cast<std::size_t>(sl) >= factors.size()) {
      throw UsageError("slot_scale: slot " + std::to_string(sl) + " outside " + std::to_string(factors.size()) + " factors");
    }
    const T f = sl < 0 ? T(1) : factors[sl];
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * f;
  }
  std::vector<std::int32_t> saved(slot.begin(), slot.end());
  record<T>("slot_scale", {x, factors}, out, [x, factors, out, saved = std::move(saved), rows, d]() mutable {
    auto go = out.grad();
    if (x.requires_grad()) {
      auto g = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T f = saved[r] < 0 ? T(1) : factors[saved[r]];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += go[r * d + j] * f;
      }
    }
    if (factors.requires_grad()) {
      auto g = factors.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (saved[r] < 0) continue;
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += go[r * d + j] * x[r * d + j];
        g[saved[r]] += acc;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask, std::size_t n_heads, std::vector<T>* probs) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    dimension_error("attention", q.shape(), k.shape());
  }
  const std::size_t b = q.dim(0), s = q.dim(1), d = q.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (key_mask.size() != b * s) dimension_error("attention", q.shape(), Shape{key_mask.size()});
  const std::size_t dk = d / n_heads;
  const T scale_factor = T(1) / std::sqrt(T(dk));

  const bool recording = g_active_tape<T> &&
                         (q.requires_grad() || k.requires_grad() || v.requires_grad());
  std::vector<T> local;
  std::vector<T>& p_all = probs ? *probs : local;
  p_all.assign(b * n_heads * s * s, T(0));

  Tensor<T> out(q.shape());
  RowMat<T> scores(s, s);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::uint8_t* mask = key_mask.data() + bi * s;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = bi * s * d + h * dk;
      ConstStridedMap<T> qh(q.ptr() + off, s, dk, Eigen::OuterStride<>(d));
      ConstStridedMap<T> kh(k.ptr() + off, s, dk, Eigen::OuterStride<>(d));
      ConstStridedMap<T> vh(v.ptr() + off, s, dk, Eigen::OuterStride<>(d));
      MatMap<T> p(p_all.data() + (bi * n_heads + h) * s * s, s, s);
      scores.noalias() = qh * kh.transpose();
      for (std::size_t i = 0; i < s; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
          if (mask[j]) mx = std::max(mx, scores(i, j) * scale_factor);
        }
        T total = 0;
        for (std::size_t j = 0; j < s; ++j) {
          const T e = mask[j] ? std::exp(scores(i, j) * scale_factor - mx) : T(0);
          p(i, j) = e;
          total += e;
        }
        if (total > 0) {
          for (std::size_t j = 0; j < s; ++j) p(i, j) /= total;
        }
      }
      StridedMap<T>(out.ptr() + off, s, dk, Eigen::OuterStride<>(d)).noalias() = p * vh;
    }
  }
  if (!recording) return out;

  std::vector<T> saved = p_all;
  record<T>("attention", {q, k, v}, out,
            [q, k, v, out, saved = std::move(saved), b, s, d, dk, n_heads, scale_factor]() mutable {
              auto go = out.grad();
              auto gq = q.requires_grad() ? q.ensure_grad() : std::span<T>{};
              auto gk = k.requires_grad() ? k.ensure_grad() : std::span<T>{};
              auto gv = v.requires_grad() ? v.ensure_grad() : std::span<T>{};
              RowMat<T> dp(s, s);
              for (std::size_t bi = 0; bi < b; ++bi) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                  const std::size_t off = bi * s * d + h * dk;
                  ConstStridedMap<T> qh(q.ptr() + off, s, dk, Eigen::OuterStride<>(d));
                  ConstStridedMap<T> kh(k.ptr() + off, s, dk, Eigen::OuterStride<>(d));
                  ConstStridedMap<T> vh(v.ptr() + off, s, dk, Eigen::OuterStride<>(d));
                  ConstStridedMap<T> dctx(go.data() + off, s, dk, Eigen::OuterStride<>(d));
                  ConstMatMap<T> p(saved.data() + (bi * n_heads + h) * s * s, s, s);
                  if (!gv.empty()) {
                    StridedMap<T>(gv.data() + off, s, dk, Eigen::OuterStride<>(d)).noalias() += p.transpose() * dctx;
                  }
                  dp.noalias() = dctx * vh.transpose();
                  for (std::size_t i = 0; i < s; ++i) {
                    const T dot = p.row(i).dot(dp.row(i));
                    for (std::size_t j = 0; j < s; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
                  }
                  if (!gq.empty()) {
                    StridedMap<T>(gq.data() + off, s, dk, Eigen::OuterStride<>(d)).noalias() += dp * kh;
                  }
                  if (!gk.empty()) {
                    StridedMap<T>(gk.data() + off, s, dk, Eigen::OuterStride<>(d)).noalias() += dp.transpose() * qh;
                  }
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, std::span<const T> target) {
  if (pred.size() != target.size() || target.empty()) {
    dimension_error("mse_loss", pred.shape(), Shape{target.size()});
  }
  const std::size_t n = target.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) total += (pred[i] - target[i]) * (pred[i] - target[i]);
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  std::vector<T> saved(target.begin(), target.end());
  record<T>("mse_loss", {pred}, out, [pred, out, saved = std::move(saved), n]() mutable {
    const T go = out.grad()[0];
    auto g = pred.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += go * T(2) * (pred[i] - saved[i]) / T(n);
  });
  return out;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels) {
  if (logits.size() != labels.size() || labels.empty()) {
    dimension_error("bce_with_logits", logits.shape(), Shape{labels.size()});
  }
  const std::size_t n = labels.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i];
    total += std::max(z, T(0)) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  std::vector<T> saved(labels.begin(), labels.end());
  record<T>("bce_with_logits", {logits}, out, [logits, out, saved = std::move(saved), n]() mutable {
    const T go = out.grad()[0];
    auto g = logits.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += go * (stable_sigmoid(logits[i]) - saved[i]) / T(n);
  });
  return out;
}

template <typename T>
Tensor<T> masked_mse(const Tensor<T>& a, const Tensor<T>& b, std::span<const std::uint8_t> row_mask) {
  if (a.shape() != b.shape() || a.rank() < 1) dimension_error("masked_mse", a.shape(), b.shape());
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  if (row_mask.size() != rows) dimension_error("masked_mse", a.shape(), Shape{row_mask.size()});
  std::size_t count = 0;
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) continue;
    ++count;
    for (std::size_t j = 0; j < d; ++j) {
      const T diff = a[r * d + j] - b[r * d + j];
      total += diff * diff;
    }
  }
  const T denom = count ? T(count * d) : T(1);
  Tensor<T> out = Tensor<T>::scalar(total / denom);
  std::vector<std::uint8_t> saved(row_mask.begin(), row_mask.end());
  record<T>("masked_mse", {a}, out, [a, b, out, saved = std::move(saved), rows, d, denom]() mutable {
    const T go = out.grad()[0];
    auto g = a.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      if (!saved[r]) continue;
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += go * T(2) * (a[r * d + j] - b[r * d + j]) / denom;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

#define QELAB_INSTANTIATE(T)                                                                         \
  template class Tensor<T>;                                                                          \
  template class Tape<T>;                                                                            \
  template class TapeScope<T>;                                                                       \
  template class NoGradScope<T>;                                                                     \
  template Tape<T>* active_tape<T>();                                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> square(const Tensor<T>&);                                                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);            \
  template Tensor<T> gelu(const Tensor<T>&);                                                         \
  template Tensor<T> tanh(const Tensor<T>&);                                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> l1_norm(const Tensor<T>&);                                                      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Shape);              \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int32_t>, std::size_t);      \
  template Tensor<T> slot_scale(const Tensor<T>&, const Tensor<T>&, std::span<const std::int32_t>);  \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                               std::span<const std::uint8_t>, std::size_t, std::vector<T>*);         \
  template Tensor<T> mse_loss(const Tensor<T>&, std::span<const T>);                                 \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const T>);                          \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
