// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/autograd.hpp"

namespace nf {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) throw ContractError("grad() on an undefined Var");
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Var& loss, Tape& tape) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  Tensor& seed = loss.node()->grad_buffer();
  seed[0] += 1.0;

  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
    // Intermediate gradients are no longer needed once propagated.
    if (it->output.get() != loss.node().get()) it->output->grad = Tensor();
  }
}

namespace detail {

Var make_result(const char* op, Tensor value, std::vector<Var> inputs,
                std::function<void(const Tensor&)> backward_fn) {
  Tape* tape = g_active_tape;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!tape || !any) return Var(std::move(value), false);

  Var out(std::move(value), true);
  Tape::Entry entry;
  entry.op = op;
  entry.inputs.reserve(inputs.size());
  for (const auto& in : inputs) entry.inputs.push_back(in.node());
  entry.output = out.node();
  entry.backward = std::move(backward_fn);
  tape->record(std::move(entry));
  return out;
}

}  // namespace detail

}  // namespace nf
