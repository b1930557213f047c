// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass. Parameters are bound by
// address so the gradient of any parameter tensor can be looked up after
// backward(). Tapes are single-use and not thread-safe; concurrent forward
// passes each own a Tape.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "desam/tensor.hpp"

namespace desam::ag {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Called during backward() with the node's own id; reads grad(self) and
  /// accumulates into parents via grad_if().
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Trainable leaf bound to `p`. Binding the same tensor twice yields the
  /// same node, so shared weights accumulate into one gradient.
  Var param(const Tensor& p);
  /// Leaf that never receives gradient (frozen weights, inputs).
  Var frozen(const Tensor& p) { return constant(p); }

  Var record(Tensor value, const std::vector<Var>& parents, Backward fn);

  /// Seeds d(root)/d(root) = 1 and propagates to every node. `root` must hold
  /// exactly one element.
  void backward(const Var& root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for `id`, allocated on first use.
  Tensor& grad(std::size_t id);
  /// Gradient buffer when `id` requires grad, otherwise nullptr.
  Tensor* grad_if(std::size_t id) {
    return nodes_[id].requires_grad ? &grad(id) : nullptr;
  }

  /// Accumulated gradient of a bound parameter, or nullptr when `p` was never
  /// bound or received no gradient.
  const Tensor* grad_of(const Tensor& p) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
};

// Elementwise (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);

// Reductions to a single-element tensor.
Var sum(const Var& a);
Var mean(const Var& a);

// Matrices (rank 2).
Var matmul(const Var& a, const Var& b);     // [m,k]x[k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k]x[n,k]^T
/// x [n,in], weight [out,in], bias [out] (bias may be invalid) -> [n,out].
Var linear(const Var& x, const Var& weight, const Var& bias);
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps = 1e-5);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

Var reshape(const Var& a, Shape shape);
/// [C,H,W] -> [H*W,C]
Var chw_to_tokens(const Var& a);
/// [H*W,C] -> [C,H,W]
Var tokens_to_chw(const Var& a, std::size_t height, std::size_t width);

// Feature maps (rank 3, [C,H,W]).
/// weight [O,C,k,k], bias [O] (may be invalid), zero padding `pad`, stride 1.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad);
/// Transposed 2x2 convolution with stride 2; weight [C,O,2,2].
Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias);
Var group_norm(const Var& x, std::size_t groups, const Var& gamma,
               const Var& beta, double eps = 1e-5);
/// [C,H,W] -> [C]
Var global_avg_pool(const Var& x);
/// y[c] = x[c] * s[c], s of shape [C].
Var scale_channels(const Var& x, const Var& s);
/// Bilinear resampling with half-pixel centres (align_corners = false).
Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w);

/// Binds parameter tensors onto a tape, either as trainable leaves or as
/// constants. Forward code takes a Binder so the same graph can be built with
/// some parameter groups frozen.
class Binder {
 public:
  explicit Binder(Tape& tape, bool trainable = true) : tape_(&tape), trainable_(trainable) {}

  Var operator()(const Tensor& t) const { return trainable_ ? tape_->param(t) : tape_->frozen(t); }
  Tape& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }
  Binder frozen() const { return Binder(*tape_, false); }

 private:
  Tape* tape_;
  bool trainable_;
};

}  // namespace desam::ag
