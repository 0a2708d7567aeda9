// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "nestedformer/ops.hpp"

namespace nf {

struct NamedParam {
  std::string name;
  Var var;
};

/// Ordered, uniquely named set of trainable tensors.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);

  const std::vector<NamedParam>& entries() const { return entries_; }
  std::vector<Var> vars() const;
  const Var* find(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }

  std::size_t element_count() const;
  std::size_t element_count(const std::string& prefix) const;

  void zero_grad();
  // Rounds every value to the nearest 32-bit float (the storage precision).
  void round_to_storage();

 private:
  std::vector<NamedParam> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Creates initialised parameters under a dotted name prefix. Copies share the
/// store and the random stream.
class ParamFactory {
 public:
  ParamFactory(ParamStore& store, std::mt19937_64& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamFactory sub(const std::string& name) const;
  std::string qualified(const std::string& name) const;

  // Uniform in +-sqrt(6 / (fan_in + fan_out)).
  Var xavier(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out);
  Var zeros(const std::string& name, Shape shape);
  Var ones(const std::string& name, Shape shape);
  Var normal(const std::string& name, Shape shape, double stddev);

 private:
  ParamStore* store_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

double xavier_bound(std::size_t fan_in, std::size_t fan_out);

// Building blocks shared by the encoder, fusion and decoder modules.

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out], undefined when constructed without bias
  Linear() = default;
  Linear(ParamFactory pf, std::size_t in, std::size_t out, bool with_bias = true);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma, beta;
  double eps = 1e-5;
  LayerNorm() = default;
  LayerNorm(ParamFactory pf, std::size_t channels);
  Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta, eps); }
};

// linear -> GELU -> linear
struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(ParamFactory pf, std::size_t channels, std::size_t hidden);
  Var operator()(const Var& x) const { return fc2(ops::gelu(fc1(x))); }
};

struct Conv3d {
  Var kernel;  // [kz, ky, kx, Cin, Cout]
  Var bias;    // [Cout]
  ops::Conv3dOptions options;
  Conv3d() = default;
  Conv3d(ParamFactory pf, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad);
  Var operator()(const Var& x) const { return ops::conv3d(x, kernel, &bias, options); }
};

}  // namespace nf
