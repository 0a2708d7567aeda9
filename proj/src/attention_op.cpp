// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <string>

#include "nestedformer/ops.hpp"

namespace nf::ops {

namespace {
thread_local LogitCounterScope* g_counter = nullptr;
}

LogitCounterScope::LogitCounterScope() : previous_(g_counter) { g_counter = this; }
LogitCounterScope::~LogitCounterScope() { g_counter = previous_; }

Var grouped_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const AttentionLayout& layout,
                      const Var* bias) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2) {
    throw DimensionError("grouped_attention: q, k, v must be 2-D, got " + to_string(q.shape()) + ", " +
                         to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  const std::size_t nq = q.shape()[0], nk = k.shape()[0];
  if (heads == 0 || q.shape()[1] != k.shape()[1] || q.shape()[1] % heads != 0 || v.shape()[0] != nk ||
      v.shape()[1] % heads != 0) {
    throw DimensionError("grouped_attention: incompatible q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()) + " for " + std::to_string(heads) + " heads");
  }
  if (layout.queries.size() != layout.keys.size() || layout.queries.empty()) {
    throw ContractError("grouped_attention: layout needs matching, nonempty query and key groups");
  }
  const std::size_t qdim = q.shape()[1], vdim = v.shape()[1];
  const std::size_t dh = qdim / heads, dv = vdim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::uint8_t> covered(nq, 0);
  std::size_t prob_total = 0;
  std::vector<std::size_t> prob_offset(layout.queries.size());
  for (std::size_t gi = 0; gi < layout.queries.size(); ++gi) {
    const auto& qs = layout.queries[gi];
    const auto& ks = layout.keys[gi];
    if (qs.empty() || ks.empty()) throw ContractError("grouped_attention: empty attention group");
    for (auto r : qs) {
      if (r >= nq || covered[r]++) throw ContractError("grouped_attention: query rows must be covered exactly once");
    }
    for (auto r : ks) {
      if (r >= nk) throw ContractError("grouped_attention: key row out of range");
    }
    if (bias && bias->shape() != Shape{qs.size(), ks.size(), heads}) {
      throw DimensionError("grouped_attention: bias " + to_string(bias->shape()) + " does not match group of " +
                           std::to_string(qs.size()) + "x" + std::to_string(ks.size()));
    }
    prob_offset[gi] = prob_total;
    prob_total += qs.size() * ks.size() * heads;
  }
  if (std::find(covered.begin(), covered.end(), 0) != covered.end()) {
    throw ContractError("grouped_attention: query rows must be covered exactly once");
  }

  auto probs = std::make_shared<std::vector<double>>(prob_total);
  Tensor out(Shape{nq, vdim});
  const double* pq = q.value().data();
  const double* pk = k.value().data();
  const double* pv = v.value().data();
  const double* pbias = bias ? bias->value().data() : nullptr;
  std::uint64_t logits = 0;
  for (std::size_t gi = 0; gi < layout.queries.size(); ++gi) {
    const auto& qs = layout.queries[gi];
    const auto& ks = layout.keys[gi];
    const std::size_t lq = qs.size(), lk = ks.size();
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + prob_offset[gi] + h * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qrow = pq + qs[i] * qdim + h * dh;
        double* prow = p + i * lk;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < lk; ++j) {
          const double* krow = pk + ks[j] * qdim + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          s *= scale;
          if (pbias) s += pbias[(i * lk + j) * heads + h];
          prow[j] = s;
          mx = std::max(mx, s);
        }
        if (!std::isfinite(mx)) throw NumericError("grouped_attention: non-finite logits");
        logits += lk;
        double total = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          total += prow[j];
        }
        const double inv = 1.0 / total;
        double* orow = out.data() + qs[i] * vdim + h * dv;
        for (std::size_t j = 0; j < lk; ++j) {
          prow[j] *= inv;
          const double* vrow = pv + ks[j] * vdim + h * dv;
          for (std::size_t c = 0; c < dv; ++c) orow[c] += prow[j] * vrow[c];
        }
      }
    }
  }
  if (g_counter) g_counter->add(logits);

  auto nq_node = q.node(), nk_node = k.node(), nv_node = v.node();
  std::shared_ptr<Node> nb = bias ? bias->node() : nullptr;
  std::vector<Var> inputs{q, k, v};
  if (bias) inputs.push_back(*bias);
  return detail::make_result(
      "grouped_attention", std::move(out), std::move(inputs),
      [nq_node, nk_node, nv_node, nb, layout, probs, prob_offset, heads, qdim, vdim, dh, dv, scale](const Tensor& g) {
        auto* gq = detail::grad_of(nq_node);
        auto* gk = detail::grad_of(nk_node);
        auto* gv = detail::grad_of(nv_node);
        auto* gb = detail::grad_of(nb);
        const double* pq = nq_node->value.data();
        const double* pk = nk_node->value.data();
        const double* pv = nv_node->value.data();
        std::vector<double> ds;
        for (std::size_t gi = 0; gi < layout.queries.size(); ++gi) {
          const auto& qs = layout.queries[gi];
          const auto& ks = layout.keys[gi];
          const std::size_t lq = qs.size(), lk = ks.size();
          ds.assign(lk, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + prob_offset[gi] + h * lq * lk;
            for (std::size_t i = 0; i < lq; ++i) {
              const double* prow = p + i * lk;
              const double* grow = g.data() + qs[i] * vdim + h * dv;
              double dot = 0.0;
              for (std::size_t j = 0; j < lk; ++j) {
                const double* vrow = pv + ks[j] * vdim + h * dv;
                double dp = 0.0;
                for (std::size_t c = 0; c < dv; ++c) dp += grow[c] * vrow[c];
                ds[j] = dp;
                dot += dp * prow[j];
                if (gv) {
                  double* dst = gv->data() + ks[j] * vdim + h * dv;
                  for (std::size_t c = 0; c < dv; ++c) dst[c] += prow[j] * grow[c];
                }
              }
              const double* qrow = pq + qs[i] * qdim + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                const double s = prow[j] * (ds[j] - dot);
                if (gb) (*gb)[(i * lk + j) * heads + h] += s;
                const double* krow = pk + ks[j] * qdim + h * dh;
                if (gq) {
                  double* dst = gq->data() + qs[i] * qdim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dst[c] += scale * s * krow[c];
                }
                if (gk) {
                  double* dst = gk->data() + ks[j] * qdim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dst[c] += scale * s * qrow[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace nf::ops
