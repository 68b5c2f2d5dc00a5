// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dynamic-graph reverse-mode differentiation. A Tape owns every intermediate
// value created during one forward pass; Var is a cheap handle into it.
// Node ids are assigned in creation order, so walking ids downwards from the
// loss is a reverse topological order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ipa/tensor.hpp"

namespace ipa {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Receives the adjoint of the node's output; pushes adjoints to inputs via
  // accumulate().
  using Adjoint = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }

  // Records an op output. The adjoint is kept only if some input needs a
  // gradient; otherwise the node is a constant.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Adjoint adjoint) {
    bool needs = false;
    for (const Var<T>& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(adjoint) : nullptr);
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Adjoint adjoint) {
    bool needs = false;
    for (const Var<T>& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(adjoint) : nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adds `delta` into the adjoint of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor<T>& delta) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.empty()) {
      node.grad = delta;
      return;
    }
    auto dst = node.grad.data();
    auto src = delta.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Mutable adjoint buffer for `id`, zero-initialised on first access.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints. Returns the number of
  /// nodes whose adjoint rule ran.
  std::size_t backward(const Var<T>& loss) {
    const Tensor<T>& v = nodes_[loss.id()].value;
    if (v.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(v.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id()].requires_grad) return 0;
    nodes_[loss.id()].grad = Tensor<T>(v.shape(), T{1});
    std::size_t visited = 0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.adjoint || node.grad.empty()) continue;
      node.adjoint(*this, node.grad);
      ++visited;
    }
    return visited;
  }

  /// Gradient of the last backward() w.r.t. `v`; zeros if `v` did not
  /// participate.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& node = nodes_[v.id()];
    return node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Adjoint adjoint;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Adjoint adjoint) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(adjoint)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// Large negative logit used to remove tokens from a softmax while keeping
// every value finite.
inline constexpr double kMaskedLogit = -1e30;

namespace ops {

using TokenIndex = std::int32_t;

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
/// x[R x C] + bias[C], bias broadcast over rows.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& bias);
/// a[M x K] * b[K x N].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// a[M x K] * b[N x K]^T.
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
/// Rows of `table` selected by `ids`; IndexError when an id is out of range.
template <typename T> Var<T> gather_rows(const Var<T>& table, std::span<const TokenIndex> ids);
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end);
template <typename T> Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> softmax(const Var<T>& x);
template <typename T> Var<T> log_softmax(const Var<T>& x);
/// Row i is a softmax over columns 0..i; later columns are exactly zero.
template <typename T> Var<T> causal_softmax(const Var<T>& scores);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// out[r] = x[r, idx[r]].
template <typename T> Var<T> pick(const Var<T>& x, std::span<const TokenIndex> idx);
/// Sets the listed columns to kMaskedLogit; no gradient flows through them.
template <typename T> Var<T> mask_cols(const Var<T>& x, std::span<const TokenIndex> cols);
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);
/// Elementwise minimum; ties route the gradient to `a`.
template <typename T> Var<T> minimum(const Var<T>& a, const Var<T>& b);
/// Row-wise KL(exp(logp) || exp(logq)) for log-probability rows.
template <typename T> Var<T> kl_rows(const Var<T>& logp, const Var<T>& logq);

}  // namespace ops
}  // namespace ipa
