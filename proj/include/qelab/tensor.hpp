// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a define-by-run tape for reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage and gradient
// slot, which is what lets tape nodes refer to their inputs and outputs.
// Use clone() for an independent copy.
//
// Recording only happens while a Tape is active on the current thread
// (see TapeScope) and at least one input requires a gradient, so inference
// code runs the same ops without saving activations.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qelab/errors.hpp"

namespace qelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  // Value of a one-element tensor.
  T item() const;

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  // Allocates a zero gradient if none is present; never clears an existing one.
  // Gradient access is const: the gradient slot belongs to the shared storage.
  std::span<T> ensure_grad() const;
  std::span<T> grad() const { return s_->grad; }
  void zero_grad() const;
  void clear_grad() const { s_->grad.clear(); }

  // Deep copy of shape and values; no gradient, same requires_grad flag.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// One recorded primitive: inputs precede the node on the tape, so a reverse
// sweep visits every consumer before its producers.
template <typename T>
struct TapeNode {
  std::string_view op;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  std::function<void()> backward;
};

template <typename T>
class Tape {
 public:
  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward);
  const std::vector<TapeNode<T>>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every node's backward rule in reverse
  // order. Leaves that require grad but receive no contribution end up with
  // a zero gradient. Throws UsageError if loss is not a single element.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<TapeNode<T>> nodes_;
};

// Makes `tape` the recording target for this thread until destroyed.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording on this thread until destroyed.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

// ---------------------------------------------------------------------------
// Primitive operations. Every op checks shapes and throws DimensionError with
// both shapes in the message.

// a: [..., k] (rank >= 2, leading dims flattened), b: [k, n] -> [..., n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise a + b; shapes must match exactly.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// x: [..., n] plus bias [n] broadcast over leading dims.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> square(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
// Throws NumericError on NaN input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Normalises over the last axis with biased variance. When var + eps == 0
// the normalised value is taken as 0, so the output collapses to beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Sum of absolute values; subgradient 0 at 0.
template <typename T>
Tensor<T> l1_norm(const Tensor<T>& x);

// Rows of `table` ([rows, d]) selected by `ids`; result is lead_shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape lead_shape);

// x: [B, S, d], index: B*K row positions -> [B, K, d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int32_t> index, std::size_t k);

// x: [B, S, d]; out[b, i, :] = x[b, i, :] * factors[slot[b*S + i]], or the row
// unchanged when slot is negative.
template <typename T>
Tensor<T> slot_scale(const Tensor<T>& x, const Tensor<T>& factors, std::span<const std::int32_t> slot);

// Multi-head scaled dot-product attention over [B, S, d] projections.
// key_mask (B*S) marks real tokens; masked keys get probability exactly 0.
// When `probs` is non-null it receives the [B, heads, S, S] probabilities.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask, std::size_t n_heads,
                    std::vector<T>* probs = nullptr);

// Mean squared error of pred [n] against constant targets.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, std::span<const T> target);

// Mean binary cross-entropy on logits, in log-sum-exp form.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels);

// Mean over rows with row_mask set and over the last axis of (a - b)^2;
// b is treated as a constant. a, b: [..., d], row_mask: one entry per row.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& a, const Tensor<T>& b, std::span<const std::uint8_t> row_mask);

}  // namespace qelab
