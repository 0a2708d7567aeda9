// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "nestedformer/params.hpp"

namespace nf {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct OptimState {
  std::uint64_t step = 0;
  std::vector<Tensor> m, v;  // moments, one per parameter in store order

  // Zero moments shaped like `params`.
  static OptimState for_params(const ParamStore& params);
};

// Decoupled weight decay followed by a bias-corrected Adam update, using the
// gradients currently held by the parameters. Gradients are checked for
// finiteness before anything is modified.
void adamw_step(ParamStore& params, OptimState& state, const AdamWConfig& cfg);

}  // namespace nf
