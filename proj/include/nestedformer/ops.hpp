// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nestedformer/autograd.hpp"

// Differentiable operations. Every op is a pure function of its inputs and
// records itself on the active tape when an input requires grad.
namespace nf::ops {

// Element-wise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// x[..., C] + v[C] broadcast over all leading positions.
Var add_lastdim(const Var& x, const Var& v);
// x[..., C] * g[..., 1]: one gate per position broadcast across channels.
Var mul_gate(const Var& x, const Var& gate);

// a[..., m, k] x b[k, n], or batched a[B..., m, k] x b[B..., k, n].
Var matmul(const Var& a, const Var& b);
Var transpose_last2(const Var& x);
// x[..., in] x w[in, out] (+ b[out]).
Var linear(const Var& x, const Var& w, const Var* bias = nullptr);

Var softmax_last(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// Sum over every axis except the last: [..., C] -> [C].
Var sum_rows(const Var& x);
// Mean over every spatial position of a channels-last volume: [..., C] -> [C].
Var global_pool(const Var& x);

Var reshape(const Var& x, Shape shape);
Var concat_last(const std::vector<Var>& xs);
Var slice_last(const Var& x, std::size_t start, std::size_t length);
// Rows of table[R, C] selected by index -> [len, C].
Var gather_rows(const Var& table, const std::vector<std::uint32_t>& index);

struct Conv3dOptions {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
};
// x[D, H, W, Cin], kernel[kz, ky, kx, Cin, Cout], bias[Cout] (optional).
Var conv3d(const Var& x, const Var& kernel, const Var* bias, const Conv3dOptions& opts = {});

// Trilinear 2x upsampling of every spatial axis, applied `times` times.
// Half-pixel sampling (corner alignment off) with edge clamping.
Var upsample2x(const Var& x, std::size_t times = 1);

// 3x3x3 average pool, stride 1, padding 1, padded cells excluded from the count.
Var avg_pool3(const Var& x);

// Mean over voxels of -log softmax(logits)[label]. logits[..., Nc].
Var cross_entropy(const Var& logits, const std::vector<std::uint8_t>& labels);

// Counts attention logits evaluated by the fused attention kernel on this
// thread while the scope is alive, summed over heads.
class LogitCounterScope {
 public:
  LogitCounterScope();
  ~LogitCounterScope();
  LogitCounterScope(const LogitCounterScope&) = delete;
  LogitCounterScope& operator=(const LogitCounterScope&) = delete;
  std::uint64_t count() const { return count_; }
  void add(std::uint64_t n) { count_ += n; }

 private:
  std::uint64_t count_ = 0;
  LogitCounterScope* previous_;
};

/// Attention restricted to groups: each group pairs a list of query rows with
/// a list of key rows, and queries attend only to keys of their own group.
/// Every query row must belong to exactly one group.
struct AttentionLayout {
  std::vector<std::vector<std::uint32_t>> queries;
  std::vector<std::vector<std::uint32_t>> keys;
};

// q[Nq, H*dh], k[Nk, H*dh], v[Nk, H*dv] -> [Nq, H*dv]. When given, bias has
// shape [Lq, Lk, H] and is added to the logits of every group (all groups
// must then share the same sizes).
Var grouped_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                      const AttentionLayout& layout, const Var* bias = nullptr);

}  // namespace nf::ops
