// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <string>

#include "gemm.hpp"
#include "nestedformer/ops.hpp"

namespace nf::ops {

namespace {

struct ConvGeometry {
  std::size_t in[3];
  std::size_t out[3];
  std::size_t k[3];
  std::size_t stride[3];
  std::size_t pad[3];
  std::size_t cin, cout;

  std::size_t taps() const { return k[0] * k[1] * k[2]; }
  std::size_t out_voxels() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const {
    return taps() == 1 && stride[0] == 1 && stride[1] == 1 && stride[2] == 1 && pad[0] == 0 && pad[1] == 0 &&
           pad[2] == 0;
  }
};

// Visits, for every output row (oz, oy) and kernel tap, the run of output
// voxels along x whose input voxel lies inside the unpadded volume. The run
// starts at output voxel o and input voxel i and has `len` entries; input
// voxels advance by stride[2].
template <class F>
void for_each_run(const ConvGeometry& g, F&& fn) {
  const auto sp = [](std::size_t v) { return static_cast<std::ptrdiff_t>(v); };
  for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
    for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
      const std::size_t row = (oz * g.out[1] + oy) * g.out[2];
      for (std::size_t a = 0; a < g.k[0]; ++a) {
        const std::ptrdiff_t iz = sp(oz * g.stride[0] + a) - sp(g.pad[0]);
        if (iz < 0 || iz >= sp(g.in[0])) continue;
        for (std::size_t b = 0; b < g.k[1]; ++b) {
          const std::ptrdiff_t iy = sp(oy * g.stride[1] + b) - sp(g.pad[1]);
          if (iy < 0 || iy >= sp(g.in[1])) continue;
          for (std::size_t c = 0; c < g.k[2]; ++c) {
            // Valid ox satisfy 0 <= ox * s + c - p < in.
            const std::ptrdiff_t s = sp(g.stride[2]);
            const std::ptrdiff_t shift = sp(c) - sp(g.pad[2]);
            const std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
            const std::ptrdiff_t hi = std::min(sp(g.out[2]) - 1, (sp(g.in[2]) - 1 - shift) / s);
            if (hi < lo) continue;
            const std::size_t i = (static_cast<std::size_t>(iz) * g.in[1] + static_cast<std::size_t>(iy)) * g.in[2] +
                                  static_cast<std::size_t>(lo * s + shift);
            fn(row + static_cast<std::size_t>(lo), i, static_cast<std::size_t>(hi - lo + 1), (a * g.k[1] + b) * g.k[2] + c);
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3d(const Var& x, const Var& kernel, const Var* bias, const Conv3dOptions& opts) {
  if (x.shape().size() != 4) throw DimensionError("conv3d: input must be [D,H,W,Cin], got " + to_string(x.shape()));
  if (kernel.shape().size() != 5) {
    throw DimensionError("conv3d: kernel must be [kz,ky,kx,Cin,Cout], got " + to_string(kernel.shape()));
  }
  ConvGeometry g{};
  g.cin = x.shape()[3];
  g.cout = kernel.shape()[4];
  if (kernel.shape()[3] != g.cin) {
    throw DimensionError("conv3d: kernel " + to_string(kernel.shape()) + " expects " +
                         std::to_string(kernel.shape()[3]) + " input channels, input is " + to_string(x.shape()));
  }
  if (bias && bias->shape() != Shape{g.cout}) {
    throw DimensionError("conv3d: bias " + to_string(bias->shape()) + " for " + std::to_string(g.cout) + " outputs");
  }
  for (int a = 0; a < 3; ++a) {
    g.in[a] = x.shape()[a];
    g.k[a] = kernel.shape()[a];
    g.stride[a] = opts.stride[a];
    g.pad[a] = opts.padding[a];
    if (g.stride[a] == 0) throw DimensionError("conv3d: stride must be >= 1");
    if (g.in[a] + 2 * g.pad[a] < g.k[a]) {
      throw DimensionError("conv3d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                           to_string(x.shape()));
    }
    g.out[a] = (g.in[a] + 2 * g.pad[a] - g.k[a]) / g.stride[a] + 1;
  }

  Tensor out(Shape{g.out[0], g.out[1], g.out[2], g.cout});
  const std::size_t cin = g.cin, cout = g.cout;
  if (bias) {
    const double* pb = bias->value().data();
    for (std::size_t o = 0; o < g.out_voxels(); ++o) std::copy(pb, pb + cout, out.data() + o * cout);
  }
  const double* in = x.value().data();
  const double* w = kernel.value().data();
  if (g.pointwise()) {
    detail::gemm_nn(g.out_voxels(), cout, cin, in, w, out.data());
  } else {
    double* po = out.data();
    const std::size_t lda = g.stride[2] * cin;
    for_each_run(g, [&](std::size_t o, std::size_t i, std::size_t len, std::size_t tap) {
      detail::gemm_nn(len, cout, cin, in + i * cin, w + tap * cin * cout, po + o * cout, lda);
    });
  }

  auto nx = x.node(), nk = kernel.node();
  std::shared_ptr<Node> nb = bias ? bias->node() : nullptr;
  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return detail::make_result("conv3d", std::move(out), std::move(inputs), [nx, nk, nb, g](const Tensor& grad) {
    const std::size_t cin = g.cin, cout = g.cout;
    auto* gx = detail::grad_of(nx);
    auto* gk = detail::grad_of(nk);
    auto* gb = detail::grad_of(nb);
    const double* gout = grad.data();
    if (gb) {
      for (std::size_t o = 0; o < g.out_voxels(); ++o) {
        for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += gout[o * cout + c];
      }
    }
    const double* in = nx->value.data();
    const double* w = nk->value.data();
    if (g.pointwise()) {
      if (gx) detail::gemm_nt(g.out_voxels(), cin, cout, gout, w, gx->data());
      if (gk) detail::gemm_tn(cin, cout, g.out_voxels(), in, gout, gk->data());
      return;
    }
    const std::size_t ld = g.stride[2] * cin;
    for_each_run(g, [&](std::size_t o, std::size_t i, std::size_t len, std::size_t tap) {
      if (gx) detail::gemm_nt(len, cin, cout, gout + o * cout, w + tap * cin * cout, gx->data() + i * cin, ld);
      if (gk) detail::gemm_tn(cin, cout, len, in + i * cin, gout + o * cout, gk->data() + tap * cin * cout, ld);
    });
  });
}

}  // namespace nf::ops
