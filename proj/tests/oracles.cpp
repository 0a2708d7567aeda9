// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

namespace nf::testing {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

Var random_var(const Shape& shape, std::mt19937_64& rng, bool requires_grad, double lo, double hi) {
  return Var(random_tensor(shape, rng, lo, hi), requires_grad);
}

Tensor masked_full_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const PairMask& allowed,
                             const PairBias& bias) {
  NoGradScope no_grad;
  const std::size_t n = q.shape()[0], nk = k.shape()[0];
  const std::size_t dh = q.shape()[1] / heads, dv = v.shape()[1] / heads;
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = ops::slice_last(q, h * dh, dh);
    const Var kh = ops::slice_last(k, h * dh, dh);
    const Var vh = ops::slice_last(v, h * dv, dv);
    Tensor mask(Shape{n, nk});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        mask[i * nk + j] = !allowed(i, j) ? -1e30 : (bias ? bias(i, j, h) : 0.0);
      }
    }
    const Var logits = ops::add(ops::scale(ops::matmul(qh, ops::transpose_last2(kh)), 1.0 / std::sqrt(double(dh))),
                                Var(std::move(mask)));
    outs.push_back(ops::matmul(ops::softmax_last(logits), vh));
  }
  return ops::concat_last(outs).value();
}

namespace {

struct Coord {
  std::size_t z, y, x;
};

Coord coord_of(const Grid& g, std::size_t k) { return {k / (g.y * g.x), (k / g.x) % g.y, k % g.x}; }

Tensor project_and_attend(const AttentionBranch& b, const Tensor& x, std::size_t heads, const PairMask& allowed,
                          const PairBias& bias = {}) {
  NoGradScope no_grad;
  const Var xv(x);
  const Var q = ops::matmul(xv, b.q.weight);
  const Var k = ops::matmul(xv, b.k.weight);
  const Var v = ops::matmul(xv, b.v.weight);
  const Var attn(masked_full_attention(q, k, v, heads, allowed, bias));
  return ops::add_lastdim(ops::matmul(attn, b.out.weight), b.out.bias).value();
}

Tensor with_rows(const Tensor& tokens, const Tensor& table, const std::function<std::size_t(std::size_t)>& row) {
  Tensor x = tokens;
  const std::size_t c = tokens.cols();
  for (std::size_t k = 0; k < tokens.rows(); ++k) {
    for (std::size_t j = 0; j < c; ++j) x[k * c + j] += table[row(k) * c + j];
  }
  return x;
}

}  // namespace

Tensor axial_oracle(const AxialAttention& branch, const TokenSeq& seq, std::size_t heads) {
  const Grid g = *seq.grid;
  const Tensor x = with_rows(seq.tokens.value(), branch.position.value(), [&](std::size_t k) { return coord_of(g, k).z; });
  return project_and_attend(branch, x, heads, [&](std::size_t i, std::size_t j) {
    const Coord a = coord_of(g, i), b = coord_of(g, j);
    return a.y == b.y && a.x == b.x;
  });
}

Tensor planar_oracle(const PlanarAttention& branch, const TokenSeq& seq, std::size_t heads) {
  const Grid g = *seq.grid;
  const Tensor x = with_rows(seq.tokens.value(), branch.position.value(), [&](std::size_t k) {
    const Coord c = coord_of(g, k);
    return c.y * g.x + c.x;
  });
  return project_and_attend(branch, x, heads,
                            [&](std::size_t i, std::size_t j) { return coord_of(g, i).z == coord_of(g, j).z; });
}

Tensor window_oracle(const WindowAttention& branch, const TokenSeq& seq, std::size_t heads,
                     const std::array<std::size_t, 3>& w) {
  const Grid g = *seq.grid;
  const Tensor& table = branch.relative_bias.value();
  auto same_window = [&](std::size_t i, std::size_t j) {
    const Coord a = coord_of(g, i), b = coord_of(g, j);
    return a.z / w[0] == b.z / w[0] && a.y / w[1] == b.y / w[1] && a.x / w[2] == b.x / w[2];
  };
  auto bias = [&](std::size_t i, std::size_t j, std::size_t h) {
    const Coord a = coord_of(g, i), b = coord_of(g, j);
    // Offset of i relative to j, shifted to be nonnegative.
    const std::size_t dz = a.z % w[0] + w[0] - 1 - b.z % w[0];
    const std::size_t dy = a.y % w[1] + w[1] - 1 - b.y % w[1];
    const std::size_t dx = a.x % w[2] + w[2] - 1 - b.x % w[2];
    const std::size_t row = (dz * (2 * w[1] - 1) + dy) * (2 * w[2] - 1) + dx;
    return table[row * heads + h];
  };
  return project_and_attend(branch, seq.tokens.value(), heads, same_window, bias);
}

double attention_oracle_error(const Grid& grid, const std::array<std::size_t, 3>& window, std::uint64_t seed) {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.dim = 8;
  cfg.qkv_dim = 8;
  cfg.window = window;
  ParamStore store;
  std::mt19937_64 rng(seed);
  ParamFactory pf(store, rng);
  AxialAttention axial(pf.sub("axial"), cfg, grid);
  PlanarAttention planar(pf.sub("planar"), cfg, grid);
  WindowAttention win(pf.sub("window"), cfg);
  // Non-trivial encodings and biases so their indexing is exercised.
  for (const auto& p : store.entries()) p.var.node()->value = random_tensor(p.var.shape(), rng, -0.7, 0.7);
  const TokenSeq seq{Var(random_tensor({grid.volume(), cfg.dim}, rng, -2.0, 2.0)), grid};

  NoGradScope no_grad;
  double err = 0.0;
  err = std::max(err, max_abs_diff(axial.forward(seq).value(), axial_oracle(axial, seq, cfg.heads)));
  err = std::max(err, max_abs_diff(planar.forward(seq).value(), planar_oracle(planar, seq, cfg.heads)));
  err = std::max(err, max_abs_diff(win.forward(seq).value(), window_oracle(win, seq, cfg.heads, window)));
  return err;
}

double brute_dice(const SegmentationMask& p, const SegmentationMask& g, std::uint8_t cls) {
  std::size_t np = 0, ng = 0, both = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const bool a = p.labels[i] == cls, b = g.labels[i] == cls;
    np += a;
    ng += b;
    both += a && b;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

namespace {

std::vector<std::array<double, 3>> brute_boundary(const SegmentationMask& m, std::uint8_t cls,
                                                  const std::array<double, 3>& sp) {
  const auto& e = m.extents;
  auto at = [&](long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= long(e[0]) || y >= long(e[1]) || x >= long(e[2])) return false;
    return m.labels[(std::size_t(z) * e[1] + std::size_t(y)) * e[2] + std::size_t(x)] == cls;
  };
  std::vector<std::array<double, 3>> pts;
  for (long z = 0; z < long(e[0]); ++z)
    for (long y = 0; y < long(e[1]); ++y)
      for (long x = 0; x < long(e[2]); ++x) {
        if (!at(z, y, x)) continue;
        const bool inner = at(z - 1, y, x) && at(z + 1, y, x) && at(z, y - 1, x) && at(z, y + 1, x) &&
                           at(z, y, x - 1) && at(z, y, x + 1);
        if (!inner) pts.push_back({z * sp[0], y * sp[1], x * sp[2]});
      }
  return pts;
}

std::vector<double> directed(const std::vector<std::array<double, 3>>& a, const std::vector<std::array<double, 3>>& b) {
  std::vector<double> d;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    d.push_back(std::sqrt(best));
  }
  std::sort(d.begin(), d.end());
  return d;
}

double pct95(const std::vector<double>& sorted) {
  const double r = 0.95 * double(sorted.size() - 1);
  const auto lo = std::size_t(std::floor(r));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (r - double(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double brute_hd95(const SegmentationMask& p, const SegmentationMask& g, std::uint8_t cls,
                  const std::array<double, 3>& spacing) {
  const auto a = brute_boundary(p, cls, spacing), b = brute_boundary(g, cls, spacing);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  return std::max(pct95(directed(a, b)), pct95(directed(b, a)));
}

double brute_hausdorff(const SegmentationMask& p, const SegmentationMask& g, std::uint8_t cls) {
  const auto a = brute_boundary(p, cls, {1, 1, 1}), b = brute_boundary(g, cls, {1, 1, 1});
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  return std::max(directed(a, b).back(), directed(b, a).back());
}

SegmentationMask random_mask(std::mt19937_64& rng, std::array<std::size_t, 3> extents, std::size_t classes,
                             double density) {
  SegmentationMask m(classes, extents);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> label(1, classes - 1);
  // A random box per class so boundaries have interiors, then salt.
  for (std::size_t c = 1; c < classes; ++c) {
    std::array<std::size_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      std::uniform_int_distribution<std::size_t> pos(0, extents[a] - 1);
      lo[a] = pos(rng);
      hi[a] = pos(rng);
      if (lo[a] > hi[a]) std::swap(lo[a], hi[a]);
    }
    for (std::size_t z = lo[0]; z <= hi[0]; ++z)
      for (std::size_t y = lo[1]; y <= hi[1]; ++y)
        for (std::size_t x = lo[2]; x <= hi[2]; ++x) m.labels[m.index(z, y, x)] = std::uint8_t(c);
  }
  for (auto& l : m.labels) {
    if (u(rng) < density) l = std::uint8_t(label(rng));
  }
  return m;
}

std::vector<std::size_t> rasterized_histogram(const std::vector<Ellipsoid>& objects,
                                              const std::array<std::size_t, 3>& e, std::size_t classes) {
  std::vector<std::size_t> hist(classes, 0);
  std::size_t foreground = 0;
  for (const auto& o : objects) {
    for (std::size_t z = 0; z < e[0]; ++z)
      for (std::size_t y = 0; y < e[1]; ++y)
        for (std::size_t x = 0; x < e[2]; ++x) {
          const double p[3] = {double(z), double(y), double(x)};
          double s = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double t = (p[a] - o.center[a]) / o.radii[a];
            s += t * t;
          }
          if (s <= 1.0) {
            ++hist[o.label];
            ++foreground;
          }
        }
  }
  hist[0] = e[0] * e[1] * e[2] - foreground;
  return hist;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("nf_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace nf::testing
