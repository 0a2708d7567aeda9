// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "nestedformer/autograd.hpp"

namespace nf {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function with fourth-order
/// central differences, (8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h, over
/// every entry of `params`. The relative error of an entry is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Var>& params, double eps = 1e-3);

}  // namespace nf
