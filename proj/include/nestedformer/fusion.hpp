// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nestedformer/params.hpp"

namespace nf {

// Spatial token grid, x fastest: token k sits at (k / (y*x), (k % (y*x)) / x, k % x).
struct Grid {
  std::size_t z = 1, y = 1, x = 1;
  std::size_t volume() const { return z * y * x; }
  bool operator==(const Grid&) const = default;
};

std::string to_string(const Grid& g);

struct TokenSeq {
  Var tokens;                // [N, C]
  std::optional<Grid> grid;  // absent for non-spatial sequences (the modality token bank)

  std::size_t length() const { return tokens.shape().at(0); }
  std::size_t channels() const { return tokens.shape().at(1); }
};

// Where the cross-attention residual is taken from: the spatially enhanced
// query tokens or the embedded tokens entering the fusion bottleneck.
enum class CmaResidual { query_stream, embedded_tokens };

const char* to_string(CmaResidual r);
CmaResidual cma_residual_from_string(const std::string& name);

struct AttentionConfig {
  std::size_t heads = 8;
  std::size_t dim = 128;  // token width C
  std::array<std::size_t, 3> window{2, 2, 2};
  std::size_t qkv_dim = 128;
  std::size_t ffn_ratio = 4;
  CmaResidual cma_residual = CmaResidual::query_stream;

  void validate() const;
  void validate_grid(const Grid& grid) const;
};

// Row groups for each restricted attention pattern.
ops::AttentionLayout axial_layout(const Grid& grid);
ops::AttentionLayout planar_layout(const Grid& grid);
ops::AttentionLayout window_layout(const Grid& grid, const std::array<std::size_t, 3>& window);

std::size_t relative_table_size(const std::array<std::size_t, 3>& window);
// For each (i, j) pair of tokens inside a window, row of the bias table.
std::vector<std::uint32_t> relative_position_index(const std::array<std::size_t, 3>& window);

// Fixed sine/cosine encoding with channels split between the z, y and x axes.
Tensor sinusoidal_encoding(const Grid& grid, std::size_t channels);

/// Channel-concatenates the modality features and maps them to C-wide tokens.
class PatchEmbedding {
 public:
  PatchEmbedding() = default;
  PatchEmbedding(ParamFactory pf, std::size_t modalities, std::size_t channels, const Grid& grid);
  TokenSeq forward(const std::vector<Var>& features) const;

  Linear proj;

 private:
  std::size_t modalities_ = 0, channels_ = 0;
  Grid grid_;
  Var position_;  // constant [N, C]
};

// Multi-head self-attention over a token subset pattern. Each branch owns its
// projections; the query/key/value maps have no bias.
class AttentionBranch {
 public:
  AttentionBranch() = default;
  AttentionBranch(ParamFactory pf, const AttentionConfig& cfg);

  Linear q, k, v, out;

 protected:
  Var attend(const Var& x, const ops::AttentionLayout& layout, const Var* bias) const;
  std::size_t heads_ = 1;
};

// Attention along z within each (y, x) column, learnable per-depth encoding.
class AxialAttention : public AttentionBranch {
 public:
  AxialAttention() = default;
  AxialAttention(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid);
  Var forward(const TokenSeq& seq) const;

  Var position;  // [z, C]
};

// Attention within each z slice, learnable per-(y, x) encoding.
class PlanarAttention : public AttentionBranch {
 public:
  PlanarAttention() = default;
  PlanarAttention(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid);
  Var forward(const TokenSeq& seq) const;

  Var position;  // [y*x, C]
};

// Non-overlapping 3D windows with a learnable relative position bias.
class WindowAttention : public AttentionBranch {
 public:
  WindowAttention() = default;
  WindowAttention(ParamFactory pf, const AttentionConfig& cfg);
  Var forward(const TokenSeq& seq) const;

  Var relative_bias;  // [(2wz-1)(2wy-1)(2wx-1), heads]

 private:
  std::array<std::size_t, 3> window_{1, 1, 1};
  std::vector<std::uint32_t> rel_index_;
};

/// Pre-norm transformer layer whose mixer is the sum of axial, planar and
/// windowed attention: z' = z + (A_z + A_xy + A_w)(LN z); out = z' + FFN(LN z').
class TsaBlock {
 public:
  TsaBlock(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid);
  TokenSeq forward(const TokenSeq& seq) const;
  // Sum of the three branches on already-normalised tokens.
  Var mix(const TokenSeq& normed) const;

  LayerNorm norm1;
  AxialAttention axial;
  PlanarAttention planar;
  WindowAttention window;
  LayerNorm norm2;
  Mlp ffn;

 private:
  Grid grid_;
  AttentionConfig cfg_;
};

/// Learns `tokens` spatial softmax maps and pools the features with them.
class TokenLearner {
 public:
  TokenLearner(ParamFactory pf, std::size_t channels, std::size_t tokens);
  // features [d, w, h, C] -> [P, C]
  Var forward(const Var& features) const;

  Linear fc1;  // C -> C
  Linear fc2;  // C -> P, no bias (softmax over positions is shift invariant)
};

// Concatenates per-modality token banks along the sequence axis, modality-major.
TokenSeq spatial_concat(const std::vector<Var>& tokens);

/// Cross-attention from spatial tokens (queries) to the multi-modal token bank
/// (keys/values), followed by a pre-norm FFN.
class CmaBlock {
 public:
  CmaBlock(ParamFactory pf, const AttentionConfig& cfg);
  // `embedded` supplies the residual when the residual mode is embedded_tokens.
  TokenSeq forward(const TokenSeq& queries, const TokenSeq& bank, const TokenSeq* embedded = nullptr) const;

  LayerNorm norm_q, norm_kv;
  Linear q, k, v, out;
  LayerNorm norm2;
  Mlp ffn;

 private:
  AttentionConfig cfg_;
};

struct NmafaOptions {
  bool use_tsa = true;
  bool use_cma = true;
  std::size_t tsa_layers = 2;
  std::size_t tokens = 32;  // P, per modality
};

/// Fusion bottleneck: embed -> T_tsa x tsa_layers -> T_cma against the token
/// learner bank.
class Nmafa {
 public:
  Nmafa(ParamFactory pf, std::size_t modalities, const AttentionConfig& cfg, const Grid& grid, const NmafaOptions& opts);
  TokenSeq forward(const std::vector<Var>& features) const;

  PatchEmbedding embed;
  std::vector<TsaBlock> tsa;
  std::vector<TokenLearner> learners;
  std::optional<CmaBlock> cma;

 private:
  std::size_t modalities_;
  Grid grid_;
  AttentionConfig cfg_;
};

}  // namespace nf
