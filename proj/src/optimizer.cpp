// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/optimizer.hpp"

#include <cmath>

namespace nf {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("train.beta1 must be in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("train.beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
}

OptimState OptimState::for_params(const ParamStore& params) {
  OptimState s;
  for (const auto& p : params.entries()) {
    s.m.emplace_back(p.var.shape());
    s.v.emplace_back(p.var.shape());
  }
  return s;
}

void adamw_step(ParamStore& params, OptimState& state, const AdamWConfig& cfg) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ContractError("adamw_step: optimizer state does not match the parameter set");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (state.m[i].shape() != entries[i].var.shape() || state.v[i].shape() != entries[i].var.shape()) {
      throw ContractError("adamw_step: moment shape mismatch for '" + entries[i].name + "'");
    }
    if (entries[i].var.has_grad() && !entries[i].var.node()->grad.all_finite()) {
      throw NumericError("adamw_step: non-finite gradient in parameter '" + entries[i].name + "'");
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var var = entries[i].var;
    Tensor& p = var.mutable_value();
    const Tensor g = var.grad();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] *= decay;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

}  // namespace nf
