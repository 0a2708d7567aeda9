// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gemm.hpp"
#include "nestedformer/ops.hpp"

namespace nf::ops {

using detail::grad_of;
using detail::make_result;

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank_at_least(const Var& x, std::size_t rank, const char* op) {
  if (x.shape().size() < rank) {
    throw DimensionError(std::string(op) + ": expected rank >= " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.add_(b.value());
  auto na = a.node(), nb = b.node();
  return make_result("add", std::move(out), {a, b}, [na, nb](const Tensor& g) {
    if (auto* ga = grad_of(na)) ga->add_(g);
    if (auto* gb = grad_of(nb)) gb->add_(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  out.add_scaled_(b.value(), -1.0);
  auto na = a.node(), nb = b.node();
  return make_result("sub", std::move(out), {a, b}, [na, nb](const Tensor& g) {
    if (auto* ga = grad_of(na)) ga->add_(g);
    if (auto* gb = grad_of(nb)) gb->add_scaled_(g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto na = a.node(), nb = b.node();
  return make_result("mul", std::move(out), {a, b}, [na, nb](const Tensor& g) {
    if (auto* ga = grad_of(na)) {
      const double* v = nb->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * v[i];
    }
    if (auto* gb = grad_of(nb)) {
      const double* v = na->value.data();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * v[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= pb[i];
  auto na = a.node(), nb = b.node();
  return make_result("div", std::move(out), {a, b}, [na, nb](const Tensor& g) {
    const double* va = na->value.data();
    const double* vb = nb->value.data();
    if (auto* ga = grad_of(na)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / vb[i];
    }
    if (auto* gb = grad_of(nb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * va[i] / (vb[i] * vb[i]);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  auto na = a.node();
  return make_result("scale", std::move(out), {a}, [na, s](const Tensor& g) {
    if (auto* ga = grad_of(na)) ga->add_scaled_(g, s);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  auto na = a.node();
  return make_result("add_scalar", std::move(out), {a}, [na](const Tensor& g) {
    if (auto* ga = grad_of(na)) ga->add_(g);
  });
}

Var add_lastdim(const Var& x, const Var& v) {
  if (v.shape().size() != 1 || x.value().cols() != v.shape()[0]) {
    throw DimensionError("add_lastdim: " + to_string(x.shape()) + " vs " + to_string(v.shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  const double* pv = v.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += pv[c];
  }
  auto nx = x.node(), nv = v.node();
  return make_result("add_lastdim", std::move(out), {x, v}, [nx, nv, rows, cols](const Tensor& g) {
    if (auto* gx = grad_of(nx)) gx->add_(g);
    if (auto* gv = grad_of(nv)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = g.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) (*gv)[c] += row[c];
      }
    }
  });
}

Var mul_gate(const Var& x, const Var& gate) {
  Shape expect = x.shape();
  if (expect.empty()) throw DimensionError("mul_gate: scalar input");
  expect.back() = 1;
  if (gate.shape() != expect) {
    throw DimensionError("mul_gate: gate " + to_string(gate.shape()) + " does not match features " +
                         to_string(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  const double* pg = gate.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= pg[r];
  }
  auto nx = x.node(), ng = gate.node();
  return make_result("mul_gate", std::move(out), {x, gate}, [nx, ng, rows, cols](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      const double* pg = ng->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cols;
        double* dst = gx->data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += gr[c] * pg[r];
      }
    }
    if (auto* gg = grad_of(ng)) {
      const double* px = nx->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * px[r * cols + c];
        (*gg)[r] += acc;
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank_at_least(a, 2, "matmul");
  require_rank_at_least(b, 2, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  const bool shared_rhs = sb.size() == 2;
  const bool batch_ok = shared_rhs || (sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin()));
  if (k != kb || !batch_ok) {
    throw DimensionError("matmul: cannot multiply " + to_string(sa) + " by " + to_string(sb));
  }
  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor out(out_shape);
  const std::size_t batch = numel(sa) / (m * k);
  if (shared_rhs) {
    detail::gemm_nn(batch * m, n, k, a.value().data(), b.value().data(), out.data());
  } else {
    for (std::size_t bi = 0; bi < batch; ++bi) {
      detail::gemm_nn(m, n, k, a.value().data() + bi * m * k, b.value().data() + bi * k * n,
                      out.data() + bi * m * n);
    }
  }
  auto na = a.node(), nb = b.node();
  return make_result("matmul", std::move(out), {a, b}, [na, nb, m, n, k, batch, shared_rhs](const Tensor& g) {
    const std::size_t rows = shared_rhs ? batch * m : m;
    const std::size_t loops = shared_rhs ? 1 : batch;
    for (std::size_t bi = 0; bi < loops; ++bi) {
      const double* gp = g.data() + bi * rows * n;
      const double* ap = na->value.data() + bi * rows * k;
      const double* bp = nb->value.data() + (shared_rhs ? 0 : bi * k * n);
      if (auto* ga = grad_of(na)) detail::gemm_nt(rows, k, n, gp, bp, ga->data() + bi * rows * k);
      if (auto* gb = grad_of(nb)) detail::gemm_tn(k, n, rows, ap, gp, gb->data() + (shared_rhs ? 0 : bi * k * n));
    }
  });
}

Var transpose_last2(const Var& x) {
  require_rank_at_least(x, 2, "transpose_last2");
  Shape s = x.shape();
  const std::size_t m = s[s.size() - 2], n = s.back();
  std::swap(s[s.size() - 2], s.back());
  Tensor out(s);
  const std::size_t batch = x.value().size() / (m * n);
  const double* src = x.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = src[b * m * n + i * n + j];
    }
  }
  auto nx = x.node();
  return make_result("transpose_last2", std::move(out), {x}, [nx, m, n, batch](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) (*gx)[b * m * n + i * n + j] += g[b * m * n + j * m + i];
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var* bias) {
  if (w.shape().size() != 2 || x.shape().empty() || x.shape().back() != w.shape()[0]) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()));
  }
  const std::size_t in = w.shape()[0], outc = w.shape()[1];
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != outc)) {
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " for weight " + to_string(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  Tensor out(out_shape);
  const std::size_t rows = x.value().rows();
  if (bias) {
    const double* pb = bias->value().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pb, pb + outc, out.data() + r * outc);
  }
  detail::gemm_nn(rows, outc, in, x.value().data(), w.value().data(), out.data());
  auto nx = x.node(), nw = w.node();
  std::shared_ptr<Node> nb = bias ? bias->node() : nullptr;
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result("linear", std::move(out), std::move(inputs), [nx, nw, nb, rows, in, outc](const Tensor& g) {
    if (auto* gx = grad_of(nx)) detail::gemm_nt(rows, in, outc, g.data(), nw->value.data(), gx->data());
    if (auto* gw = grad_of(nw)) detail::gemm_tn(in, outc, rows, nx->value.data(), g.data(), gw->data());
    if (auto* gb = grad_of(nb)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = g.data() + r * outc;
        for (std::size_t c = 0; c < outc; ++c) (*gb)[c] += row[c];
      }
    }
  });
}

Var softmax_last(const Var& x) {
  if (!x.value().all_finite()) throw NumericError("softmax_last: non-finite input");
  Tensor out = x.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    const double inv = 1.0 / total;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
  auto nx = x.node();
  auto saved = std::make_shared<Tensor>(out);
  return make_result("softmax_last", std::move(out), {x}, [nx, saved, rows, cols](const Tensor& g) {
    auto* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = saved->data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
      double* dst = gx->data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += y[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t cols = x.value().cols();
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: channel extent " + std::to_string(cols) + " vs gamma " +
                         to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const std::size_t rows = x.value().rows();
  Tensor out(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* pg = gamma.value().data();
  const double* pb = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.value().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* xh = xhat->data() + r * cols;
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      xh[c] = (in[c] - mu) * rs;
      o[c] = xh[c] * pg[c] + pb[c];
    }
  }
  auto nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result("layer_norm", std::move(out), {x, gamma, beta},
                     [nx, ng, nb, xhat, rstd, rows, cols](const Tensor& g) {
                       auto* gg = grad_of(ng);
                       auto* gb = grad_of(nb);
                       auto* gx = grad_of(nx);
                       const double* pg = ng->value.data();
                       std::vector<double> dxh(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * cols;
                         const double* xh = xhat->data() + r * cols;
                         if (gg) for (std::size_t c = 0; c < cols; ++c) (*gg)[c] += gr[c] * xh[c];
                         if (gb) for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += gr[c];
                         if (!gx) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dxh[c] = gr[c] * pg[c];
                           m1 += dxh[c];
                           m2 += dxh[c] * xh[c];
                         }
                         m1 /= static_cast<double>(cols);
                         m2 /= static_cast<double>(cols);
                         double* dst = gx->data() + r * cols;
                         const double rs = (*rstd)[r];
                         for (std::size_t c = 0; c < cols; ++c) dst[c] += rs * (dxh[c] - m1 - xh[c] * m2);
                       }
                     });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  auto nx = x.node();
  return make_result("gelu", std::move(out), {x}, [nx](const Tensor& g) {
    auto* gx = grad_of(nx);
    if (!gx) return;
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    const double* in = nx->value.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  auto nx = x.node();
  auto saved = std::make_shared<Tensor>(out);
  return make_result("sigmoid", std::move(out), {x}, [nx, saved](const Tensor& g) {
    auto* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = (*saved)[i];
      (*gx)[i] += g[i] * y * (1.0 - y);
    }
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  auto nx = x.node();
  return make_result("sum", Tensor::scalar(total), {x}, [nx](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      for (auto& v : gx->values()) v += g[0];
    }
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_rows(const Var& x) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  Tensor out(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.value().data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
  auto nx = x.node();
  return make_result("sum_rows", std::move(out), {x}, [nx, rows, cols](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double* dst = gx->data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += g[c];
      }
    }
  });
}

Var global_pool(const Var& x) {
  require_rank_at_least(x, 2, "global_pool");
  return scale(sum_rows(x), 1.0 / static_cast<double>(x.value().rows()));
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  auto nx = x.node();
  return make_result("reshape", std::move(out), {x}, [nx](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

Var concat_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = xs[0].shape();
  if (lead.empty()) throw DimensionError("concat_last: scalar input");
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape l = x.shape();
    if (l.empty()) throw DimensionError("concat_last: scalar input");
    const std::size_t c = l.back();
    l.pop_back();
    if (l != lead) {
      throw DimensionError("concat_last: leading extents differ, " + to_string(xs[0].shape()) + " vs " +
                           to_string(x.shape()));
    }
    widths.push_back(c);
    total += c;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  const std::size_t rows = out.rows();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double* src = xs[i].value().data();
    const std::size_t w = widths[i];
    for (std::size_t r = 0; r < rows; ++r) std::copy(src + r * w, src + (r + 1) * w, out.data() + r * total + offset);
    offset += w;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return make_result("concat_last", std::move(out), xs, [nodes, widths, rows, total](const Tensor& g) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const std::size_t w = widths[i];
      if (auto* gi = grad_of(nodes[i])) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* src = g.data() + r * total + offset;
          double* dst = gi->data() + r * w;
          for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
      }
      offset += w;
    }
  });
}

Var slice_last(const Var& x, std::size_t start, std::size_t length) {
  const std::size_t cols = x.value().cols();
  if (x.shape().empty() || length == 0 || start + length > cols) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + to_string(x.shape()));
  }
  Shape s = x.shape();
  s.back() = length;
  Tensor out(s);
  const std::size_t rows = out.rows();
  const double* src = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(src + r * cols + start, src + r * cols + start + length, out.data() + r * length);
  }
  auto nx = x.node();
  return make_result("slice_last", std::move(out), {x}, [nx, rows, cols, start, length](const Tensor& g) {
    if (auto* gx = grad_of(nx)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < length; ++c) (*gx)[r * cols + start + c] += g[r * length + c];
      }
    }
  });
}

Var gather_rows(const Var& table, const std::vector<std::uint32_t>& index) {
  if (table.shape().size() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + to_string(table.shape()));
  const std::size_t rows = table.shape()[0], cols = table.shape()[1];
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out(Shape{index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of range " + std::to_string(rows));
    }
    const double* src = table.value().data() + index[i] * cols;
    std::copy(src, src + cols, out.data() + i * cols);
  }
  auto nt = table.node();
  return make_result("gather_rows", std::move(out), {table}, [nt, index, cols](const Tensor& g) {
    if (auto* gt = grad_of(nt)) {
      for (std::size_t i = 0; i < index.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) (*gt)[index[i] * cols + c] += g[i * cols + c];
      }
    }
  });
}

namespace {

struct Lerp {
  std::size_t lo, hi;
  double wlo, whi;
};

std::vector<Lerp> upsample_axis(std::size_t n) {
  std::vector<Lerp> out(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > n - 1) lo = n - 1;
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double whi = src - static_cast<double>(lo);
    out[o] = {lo, hi, 1.0 - whi, whi};
  }
  return out;
}

Var upsample_once(const Var& x) {
  if (x.shape().size() != 4) throw DimensionError("upsample2x: expected [D,H,W,C], got " + to_string(x.shape()));
  const std::size_t D = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  const auto az = upsample_axis(D), ay = upsample_axis(H), ax = upsample_axis(W);
  Tensor out(Shape{2 * D, 2 * H, 2 * W, C});
  const double* in = x.value().data();
  auto idx = [&](std::size_t z, std::size_t y, std::size_t xx) { return ((z * H + y) * W + xx) * C; };
  for (std::size_t z = 0; z < 2 * D; ++z) {
    for (std::size_t y = 0; y < 2 * H; ++y) {
      for (std::size_t xo = 0; xo < 2 * W; ++xo) {
        double* dst = out.data() + ((z * 2 * H + y) * 2 * W + xo) * C;
        const std::size_t zs[2] = {az[z].lo, az[z].hi}, ys[2] = {ay[y].lo, ay[y].hi}, xs[2] = {ax[xo].lo, ax[xo].hi};
        const double wz[2] = {az[z].wlo, az[z].whi}, wy[2] = {ay[y].wlo, ay[y].whi}, wx[2] = {ax[xo].wlo, ax[xo].whi};
        for (int a = 0; a < 2; ++a) {
          for (int b = 0; b < 2; ++b) {
            for (int c = 0; c < 2; ++c) {
              const double w = wz[a] * wy[b] * wx[c];
              if (w == 0.0) continue;
              const double* src = in + idx(zs[a], ys[b], xs[c]);
              for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += w * src[ch];
            }
          }
        }
      }
    }
  }
  auto nx = x.node();
  return make_result("upsample2x", std::move(out), {x}, [nx, az, ay, ax, D, H, W, C](const Tensor& g) {
    auto* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t z = 0; z < 2 * D; ++z) {
      for (std::size_t y = 0; y < 2 * H; ++y) {
        for (std::size_t xo = 0; xo < 2 * W; ++xo) {
          const double* src = g.data() + ((z * 2 * H + y) * 2 * W + xo) * C;
          const std::size_t zs[2] = {az[z].lo, az[z].hi}, ys[2] = {ay[y].lo, ay[y].hi}, xs[2] = {ax[xo].lo, ax[xo].hi};
          const double wz[2] = {az[z].wlo, az[z].whi}, wy[2] = {ay[y].wlo, ay[y].whi}, wx[2] = {ax[xo].wlo, ax[xo].whi};
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              for (int c = 0; c < 2; ++c) {
                const double w = wz[a] * wy[b] * wx[c];
                if (w == 0.0) continue;
                double* dst = gx->data() + ((zs[a] * H + ys[b]) * W + xs[c]) * C;
                for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += w * src[ch];
              }
            }
          }
        }
      }
    }
  });
}

}  // namespace

Var upsample2x(const Var& x, std::size_t times) {
  Var out = x;
  for (std::size_t i = 0; i < times; ++i) out = upsample_once(out);
  return out;
}

Var avg_pool3(const Var& x) {
  if (x.shape().size() != 4) throw DimensionError("avg_pool3: expected [D,H,W,C], got " + to_string(x.shape()));
  const std::size_t D = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
  Tensor out(x.shape());
  const double* in = x.value().data();
  auto for_each_window = [D, H, W](std::size_t z, std::size_t y, std::size_t xx, auto&& fn) {
    const std::size_t z0 = z ? z - 1 : 0, z1 = std::min(z + 1, D - 1);
    const std::size_t y0 = y ? y - 1 : 0, y1 = std::min(y + 1, H - 1);
    const std::size_t x0 = xx ? xx - 1 : 0, x1 = std::min(xx + 1, W - 1);
    const double inv = 1.0 / static_cast<double>((z1 - z0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1));
    for (std::size_t a = z0; a <= z1; ++a)
      for (std::size_t b = y0; b <= y1; ++b)
        for (std::size_t c = x0; c <= x1; ++c) fn(((a * H + b) * W + c), inv);
  };
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double* dst = out.data() + ((z * H + y) * W + xx) * C;
        for_each_window(z, y, xx, [&](std::size_t v, double inv) {
          for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += inv * in[v * C + ch];
        });
      }
  auto nx = x.node();
  return make_result("avg_pool3", std::move(out), {x}, [nx, for_each_window, D, H, W, C](const Tensor& g) {
    auto* gx = grad_of(nx);
    if (!gx) return;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double* src = g.data() + ((z * H + y) * W + xx) * C;
          for_each_window(z, y, xx, [&](std::size_t v, double inv) {
            for (std::size_t ch = 0; ch < C; ++ch) (*gx)[v * C + ch] += inv * src[ch];
          });
        }
  });
}

Var cross_entropy(const Var& logits, const std::vector<std::uint8_t>& labels) {
  const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " voxels");
  }
  if (!logits.value().all_finite()) throw NumericError("cross_entropy: non-finite logits");
  auto probs = std::make_shared<Tensor>(logits.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[r]) + " at voxel " + std::to_string(r) +
                          " is not below class count " + std::to_string(cols));
    }
    const double* row = logits.value().data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[r]];
    double* p = probs->data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) p[c] = std::exp(row[c] - lse);
  }
  auto nl = logits.node();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_result("cross_entropy", Tensor::scalar(total * inv_rows), {logits},
                     [nl, probs, labels, rows, cols, inv_rows](const Tensor& g) {
                       auto* gl = grad_of(nl);
                       if (!gl) return;
                       const double s = g[0] * inv_rows;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* p = probs->data() + r * cols;
                         double* dst = gl->data() + r * cols;
                         for (std::size_t c = 0; c < cols; ++c) dst[c] += s * p[c];
                         dst[labels[r]] -= s;
                       }
                     });
}

}  // namespace nf::ops
