// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "nestedformer/tensor.hpp"

namespace nf {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something accumulates into it
  bool requires_grad = false;

  // Zero-initialised gradient buffer with the value's shape.
  Tensor& grad_buffer();
};

/// Handle to a value that may participate in reverse-mode differentiation.
/// Copies share the underlying node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient, or zeros when nothing reached this value.
  Tensor grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so inputs always precede the entries that consume them.
class Tape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void(const Tensor& grad_out)> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

// Installs a tape as the active recorder for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Replays the tape in reverse, accumulating d(loss)/d(leaf) into every
// reachable leaf that requires grad. The tape is left intact.
void backward(const Var& loss, Tape& tape);

namespace detail {

// Records an op on the active tape when any input requires grad. The
// backward callback receives the output gradient.
Var make_result(const char* op, Tensor value, std::vector<Var> inputs,
                std::function<void(const Tensor&)> backward);

inline bool wants_grad(const Var& v) { return v.requires_grad(); }

// Accumulate into an input's gradient if it participates.
inline Tensor* grad_of(const std::shared_ptr<Node>& n) {
  return n && n->requires_grad ? &n->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace nf
