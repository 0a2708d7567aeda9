// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace nf {

namespace {

double evaluate(const std::function<Var()>& f) {
  NoGradScope no_grad;
  const Var out = f();
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Var>& params, double eps) {
  for (const auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: every parameter must require grad");
  }
  std::vector<Var> ps = params;
  for (auto& p : ps) p.zero_grad();

  Tape tape;
  {
    TapeScope scope(tape);
    const Var loss = f();
    if (!std::isfinite(loss.value().item())) throw NumericError("grad_check: function value is not finite");
    backward(loss, tape);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(ps.size());
  for (const auto& p : ps) analytic.push_back(p.grad());
  tape.clear();

  GradCheckResult result;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    Tensor& value = ps[pi].mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up1 = evaluate(f);
      value[i] = saved - eps;
      const double down1 = evaluate(f);
      value[i] = saved + 2.0 * eps;
      const double up2 = evaluate(f);
      value[i] = saved - 2.0 * eps;
      const double down2 = evaluate(f);
      value[i] = saved;
      const double numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.entries;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : ps) p.zero_grad();
  return result;
}

}  // namespace nf
