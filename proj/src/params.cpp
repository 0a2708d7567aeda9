// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/params.hpp"

#include <cmath>

namespace nf {

Var ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({name, Var::parameter(std::move(init))});
  return entries_.back().var;
}

std::vector<Var> ParamStore::vars() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var);
  return out;
}

const Var* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].var;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

std::size_t ParamStore::element_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.var.value().size();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

void ParamStore::round_to_storage() {
  for (auto& e : entries_) {
    for (auto& v : e.var.mutable_value().values()) v = static_cast<double>(static_cast<float>(v));
  }
}

ParamFactory ParamFactory::sub(const std::string& name) const { return ParamFactory(*store_, *rng_, qualified(name)); }

std::string ParamFactory::qualified(const std::string& name) const {
  return prefix_.empty() ? name : prefix_ + "." + name;
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Var ParamFactory::xavier(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double bound = xavier_bound(fan_in, fan_out);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(*rng_);
  return store_->add(qualified(name), std::move(t));
}

Var ParamFactory::zeros(const std::string& name, Shape shape) {
  return store_->add(qualified(name), Tensor(std::move(shape)));
}

Var ParamFactory::ones(const std::string& name, Shape shape) {
  return store_->add(qualified(name), Tensor(std::move(shape), 1.0));
}

Var ParamFactory::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(*rng_);
  return store_->add(qualified(name), std::move(t));
}

Linear::Linear(ParamFactory pf, std::size_t in, std::size_t out, bool with_bias)
    : weight(pf.xavier("weight", {in, out}, in, out)) {
  if (with_bias) bias = pf.zeros("bias", {out});
}

Var Linear::operator()(const Var& x) const { return ops::linear(x, weight, bias.defined() ? &bias : nullptr); }

LayerNorm::LayerNorm(ParamFactory pf, std::size_t channels)
    : gamma(pf.ones("gamma", {channels})), beta(pf.zeros("beta", {channels})) {}

Mlp::Mlp(ParamFactory pf, std::size_t channels, std::size_t hidden)
    : fc1(pf.sub("fc1"), channels, hidden), fc2(pf.sub("fc2"), hidden, channels) {}

Conv3d::Conv3d(ParamFactory pf, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad)
    : kernel(pf.xavier("kernel", {k, k, k, cin, cout}, cin * k * k * k, cout * k * k * k)),
      bias(pf.zeros("bias", {cout})) {
  options.stride = {stride, stride, stride};
  options.padding = {pad, pad, pad};
}

}  // namespace nf
