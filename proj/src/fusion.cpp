// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/fusion.hpp"

#include <cmath>

namespace nf {

std::string to_string(const Grid& g) {
  return std::to_string(g.z) + "x" + std::to_string(g.y) + "x" + std::to_string(g.x);
}

const char* to_string(CmaResidual r) {
  return r == CmaResidual::query_stream ? "query_stream" : "embedded_tokens";
}

CmaResidual cma_residual_from_string(const std::string& name) {
  if (name == "query_stream") return CmaResidual::query_stream;
  if (name == "embedded_tokens") return CmaResidual::embedded_tokens;
  throw ConfigError("attention.cma_residual: unknown value '" + name + "' (expected query_stream or embedded_tokens)");
}

void AttentionConfig::validate() const {
  if (heads == 0 || dim == 0 || qkv_dim == 0 || ffn_ratio == 0) {
    throw ConfigError("attention: heads, dim, qkv_dim and ffn_ratio must be positive");
  }
  if (dim % heads != 0) throw ConfigError("attention.dim must be divisible by attention.heads");
  if (qkv_dim % heads != 0) throw ConfigError("attention.qkv_dim must be divisible by attention.heads");
  for (auto w : window) {
    if (w == 0) throw ConfigError("attention.window entries must be positive");
  }
}

void AttentionConfig::validate_grid(const Grid& grid) const {
  if (grid.z % window[0] || grid.y % window[1] || grid.x % window[2]) {
    throw DimensionError("window " + std::to_string(window[0]) + "x" + std::to_string(window[1]) + "x" +
                         std::to_string(window[2]) + " does not divide grid " + to_string(grid));
  }
}

ops::AttentionLayout axial_layout(const Grid& g) {
  ops::AttentionLayout layout;
  for (std::size_t y = 0; y < g.y; ++y) {
    for (std::size_t x = 0; x < g.x; ++x) {
      std::vector<std::uint32_t> col;
      for (std::size_t z = 0; z < g.z; ++z) col.push_back(static_cast<std::uint32_t>((z * g.y + y) * g.x + x));
      layout.queries.push_back(col);
      layout.keys.push_back(std::move(col));
    }
  }
  return layout;
}

ops::AttentionLayout planar_layout(const Grid& g) {
  ops::AttentionLayout layout;
  for (std::size_t z = 0; z < g.z; ++z) {
    std::vector<std::uint32_t> slice;
    for (std::size_t i = 0; i < g.y * g.x; ++i) slice.push_back(static_cast<std::uint32_t>(z * g.y * g.x + i));
    layout.queries.push_back(slice);
    layout.keys.push_back(std::move(slice));
  }
  return layout;
}

ops::AttentionLayout window_layout(const Grid& g, const std::array<std::size_t, 3>& w) {
  if (g.z % w[0] || g.y % w[1] || g.x % w[2]) {
    throw DimensionError("window does not divide grid " + to_string(g));
  }
  ops::AttentionLayout layout;
  for (std::size_t bz = 0; bz < g.z; bz += w[0]) {
    for (std::size_t by = 0; by < g.y; by += w[1]) {
      for (std::size_t bx = 0; bx < g.x; bx += w[2]) {
        std::vector<std::uint32_t> win;
        for (std::size_t a = 0; a < w[0]; ++a)
          for (std::size_t b = 0; b < w[1]; ++b)
            for (std::size_t c = 0; c < w[2]; ++c)
              win.push_back(static_cast<std::uint32_t>(((bz + a) * g.y + by + b) * g.x + bx + c));
        layout.queries.push_back(win);
        layout.keys.push_back(std::move(win));
      }
    }
  }
  return layout;
}

std::size_t relative_table_size(const std::array<std::size_t, 3>& w) {
  return (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1);
}

std::vector<std::uint32_t> relative_position_index(const std::array<std::size_t, 3>& w) {
  const std::size_t n = w[0] * w[1] * w[2];
  std::vector<std::uint32_t> index(n * n);
  auto coord = [&](std::size_t i) {
    return std::array<std::size_t, 3>{i / (w[1] * w[2]), (i / w[2]) % w[1], i % w[2]};
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto ci = coord(i);
    for (std::size_t j = 0; j < n; ++j) {
      const auto cj = coord(j);
      const std::size_t dz = ci[0] + w[0] - 1 - cj[0];
      const std::size_t dy = ci[1] + w[1] - 1 - cj[1];
      const std::size_t dx = ci[2] + w[2] - 1 - cj[2];
      index[i * n + j] = static_cast<std::uint32_t>((dz * (2 * w[1] - 1) + dy) * (2 * w[2] - 1) + dx);
    }
  }
  return index;
}

Tensor sinusoidal_encoding(const Grid& grid, std::size_t channels) {
  Tensor out(Shape{grid.volume(), channels});
  const std::size_t per_axis = channels / 3;
  const std::size_t widths[3] = {per_axis, per_axis, channels - 2 * per_axis};
  for (std::size_t k = 0; k < grid.volume(); ++k) {
    const double pos[3] = {static_cast<double>(k / (grid.y * grid.x)), static_cast<double>((k / grid.x) % grid.y),
                           static_cast<double>(k % grid.x)};
    std::size_t offset = 0;
    for (int a = 0; a < 3; ++a) {
      const std::size_t w = widths[a];
      for (std::size_t c = 0; c < w; ++c) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / static_cast<double>(std::max<std::size_t>(w, 1)));
        out[k * channels + offset + c] = (c % 2 == 0) ? std::sin(pos[a] * freq) : std::cos(pos[a] * freq);
      }
      offset += w;
    }
  }
  return out;
}

PatchEmbedding::PatchEmbedding(ParamFactory pf, std::size_t modalities, std::size_t channels, const Grid& grid)
    : proj(pf.sub("proj"), modalities * channels, channels),
      modalities_(modalities),
      channels_(channels),
      grid_(grid),
      position_(sinusoidal_encoding(grid, channels)) {}

TokenSeq PatchEmbedding::forward(const std::vector<Var>& features) const {
  if (features.size() != modalities_) {
    throw DimensionError("channel_concat_embed: expected " + std::to_string(modalities_) + " modalities, got " +
                         std::to_string(features.size()));
  }
  const Shape expect{grid_.z, grid_.y, grid_.x, channels_};
  for (const auto& f : features) {
    if (f.shape() != expect) {
      throw DimensionError("channel_concat_embed: feature " + to_string(f.shape()) + " does not match " +
                           to_string(expect));
    }
  }
  const Var concat = features.size() == 1 ? features[0] : ops::concat_last(features);
  const Var tokens = ops::reshape(proj(concat), {grid_.volume(), channels_});
  return {ops::add(tokens, position_), grid_};
}

AttentionBranch::AttentionBranch(ParamFactory pf, const AttentionConfig& cfg)
    : q(pf.sub("q"), cfg.dim, cfg.qkv_dim, false),
      k(pf.sub("k"), cfg.dim, cfg.qkv_dim, false),
      v(pf.sub("v"), cfg.dim, cfg.qkv_dim, false),
      out(pf.sub("out"), cfg.qkv_dim, cfg.dim),
      heads_(cfg.heads) {}

Var AttentionBranch::attend(const Var& x, const ops::AttentionLayout& layout, const Var* bias) const {
  return out(ops::grouped_attention(q(x), k(x), v(x), heads_, layout, bias));
}

namespace {

const Grid& require_grid(const TokenSeq& seq, const char* op) {
  if (!seq.grid) throw ContractError(std::string(op) + ": token sequence has no spatial grid");
  if (seq.grid->volume() != seq.length()) {
    throw DimensionError(std::string(op) + ": grid " + to_string(*seq.grid) + " does not match " +
                         std::to_string(seq.length()) + " tokens");
  }
  return *seq.grid;
}

// Per-token encoding rows for a [rows, C] table selected by index.
std::vector<std::uint32_t> axial_rows(const Grid& g) {
  std::vector<std::uint32_t> idx(g.volume());
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<std::uint32_t>(k / (g.y * g.x));
  return idx;
}

std::vector<std::uint32_t> planar_rows(const Grid& g) {
  std::vector<std::uint32_t> idx(g.volume());
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<std::uint32_t>(k % (g.y * g.x));
  return idx;
}

}  // namespace

AxialAttention::AxialAttention(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid)
    : AttentionBranch(pf, cfg), position(pf.normal("position", {grid.z, cfg.dim}, 0.02)) {}

Var AxialAttention::forward(const TokenSeq& seq) const {
  const Grid& g = require_grid(seq, "mha_axial");
  if (position.shape()[0] != g.z) throw DimensionError("mha_axial: encoding built for a different grid depth");
  const Var x = ops::add(seq.tokens, ops::gather_rows(position, axial_rows(g)));
  return attend(x, axial_layout(g), nullptr);
}

PlanarAttention::PlanarAttention(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid)
    : AttentionBranch(pf, cfg), position(pf.normal("position", {grid.y * grid.x, cfg.dim}, 0.02)) {}

Var PlanarAttention::forward(const TokenSeq& seq) const {
  const Grid& g = require_grid(seq, "mha_planar");
  if (position.shape()[0] != g.y * g.x) throw DimensionError("mha_planar: encoding built for a different slice size");
  const Var x = ops::add(seq.tokens, ops::gather_rows(position, planar_rows(g)));
  return attend(x, planar_layout(g), nullptr);
}

WindowAttention::WindowAttention(ParamFactory pf, const AttentionConfig& cfg)
    : AttentionBranch(pf, cfg),
      relative_bias(pf.normal("relative_bias", {relative_table_size(cfg.window), cfg.heads}, 0.02)),
      window_(cfg.window),
      rel_index_(relative_position_index(cfg.window)) {}

Var WindowAttention::forward(const TokenSeq& seq) const {
  const Grid& g = require_grid(seq, "mha_window");
  if (g.z % window_[0] || g.y % window_[1] || g.x % window_[2]) {
    throw DimensionError("mha_window: window " + std::to_string(window_[0]) + "x" + std::to_string(window_[1]) + "x" +
                         std::to_string(window_[2]) + " does not divide grid " + to_string(g));
  }
  const std::size_t lw = window_[0] * window_[1] * window_[2];
  const Var bias = ops::reshape(ops::gather_rows(relative_bias, rel_index_), {lw, lw, heads_});
  return attend(seq.tokens, window_layout(g, window_), &bias);
}

TsaBlock::TsaBlock(ParamFactory pf, const AttentionConfig& cfg, const Grid& grid)
    : norm1(pf.sub("norm1"), cfg.dim),
      axial(pf.sub("axial"), cfg, grid),
      planar(pf.sub("planar"), cfg, grid),
      window(pf.sub("window"), cfg),
      norm2(pf.sub("norm2"), cfg.dim),
      ffn(pf.sub("ffn"), cfg.dim, cfg.dim * cfg.ffn_ratio),
      grid_(grid),
      cfg_(cfg) {
  cfg.validate_grid(grid);
}

Var TsaBlock::mix(const TokenSeq& normed) const {
  return ops::add(ops::add(axial.forward(normed), planar.forward(normed)), window.forward(normed));
}

TokenSeq TsaBlock::forward(const TokenSeq& seq) const {
  const Grid& g = require_grid(seq, "tsa_block");
  if (!(g == grid_)) throw DimensionError("tsa_block: grid " + to_string(g) + " differs from " + to_string(grid_));
  const Var z1 = ops::add(seq.tokens, mix({norm1(seq.tokens), g}));
  return {ops::add(z1, ffn(norm2(z1))), g};
}

TokenLearner::TokenLearner(ParamFactory pf, std::size_t channels, std::size_t tokens)
    : fc1(pf.sub("fc1"), channels, channels), fc2(pf.sub("fc2"), channels, tokens, false) {}

Var TokenLearner::forward(const Var& features) const {
  if (features.shape().size() < 2) throw DimensionError("token_learner: expected [..., C], got " + to_string(features.shape()));
  const std::size_t c = features.shape().back();
  const Var flat = ops::reshape(features, {features.value().rows(), c});
  const Var logits = fc2(ops::gelu(fc1(flat)));                         // [N, P]
  const Var weights = ops::softmax_last(ops::transpose_last2(logits));  // [P, N]
  return ops::matmul(weights, flat);
}

TokenSeq spatial_concat(const std::vector<Var>& tokens) {
  if (tokens.empty()) throw DimensionError("spatial_concat: no modalities");
  const Shape first = tokens[0].shape();
  if (first.size() != 2) throw DimensionError("spatial_concat: tokens must be [P, C], got " + to_string(first));
  for (const auto& t : tokens) {
    if (t.shape() != first) {
      throw DimensionError("spatial_concat: token bank " + to_string(t.shape()) + " differs from " + to_string(first));
    }
  }
  if (tokens.size() == 1) return {tokens[0], std::nullopt};
  // [P, C] blocks stacked modality-major: transpose, concatenate along the
  // last axis, transpose back.
  std::vector<Var> cols;
  for (const auto& t : tokens) cols.push_back(ops::transpose_last2(t));
  return {ops::transpose_last2(ops::concat_last(cols)), std::nullopt};
}

CmaBlock::CmaBlock(ParamFactory pf, const AttentionConfig& cfg)
    : norm_q(pf.sub("norm_q"), cfg.dim),
      norm_kv(pf.sub("norm_kv"), cfg.dim),
      q(pf.sub("q"), cfg.dim, cfg.qkv_dim, false),
      k(pf.sub("k"), cfg.dim, cfg.qkv_dim, false),
      v(pf.sub("v"), cfg.dim, cfg.qkv_dim, false),
      out(pf.sub("out"), cfg.qkv_dim, cfg.dim),
      norm2(pf.sub("norm2"), cfg.dim),
      ffn(pf.sub("ffn"), cfg.dim, cfg.dim * cfg.ffn_ratio),
      cfg_(cfg) {}

TokenSeq CmaBlock::forward(const TokenSeq& queries, const TokenSeq& bank, const TokenSeq* embedded) const {
  if (queries.tokens.shape().size() != 2 || bank.tokens.shape().size() != 2 || queries.channels() != cfg_.dim ||
      bank.channels() != cfg_.dim) {
    throw DimensionError("cma_block: queries " + to_string(queries.tokens.shape()) + " and bank " +
                         to_string(bank.tokens.shape()) + " must both be [*, " + std::to_string(cfg_.dim) + "]");
  }
  ops::AttentionLayout layout;
  layout.queries.emplace_back(queries.length());
  layout.keys.emplace_back(bank.length());
  for (std::size_t i = 0; i < queries.length(); ++i) layout.queries[0][i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < bank.length(); ++i) layout.keys[0][i] = static_cast<std::uint32_t>(i);

  const Var qn = norm_q(queries.tokens);
  const Var kv = norm_kv(bank.tokens);
  const Var attn = out(ops::grouped_attention(q(qn), k(kv), v(kv), cfg_.heads, layout));

  Var residual = queries.tokens;
  if (cfg_.cma_residual == CmaResidual::embedded_tokens) {
    if (!embedded) throw ContractError("cma_block: embedded_tokens residual requires the embedded sequence");
    if (embedded->tokens.shape() != queries.tokens.shape()) {
      throw DimensionError("cma_block: embedded tokens " + to_string(embedded->tokens.shape()) + " vs queries " +
                           to_string(queries.tokens.shape()));
    }
    residual = embedded->tokens;
  }
  const Var x = ops::add(residual, attn);
  return {ops::add(x, ffn(norm2(x))), queries.grid};
}

Nmafa::Nmafa(ParamFactory pf, std::size_t modalities, const AttentionConfig& cfg, const Grid& grid,
             const NmafaOptions& opts)
    : embed(pf.sub("embed"), modalities, cfg.dim, grid), modalities_(modalities), grid_(grid), cfg_(cfg) {
  cfg.validate();
  if (opts.use_tsa) {
    cfg.validate_grid(grid);
    for (std::size_t i = 0; i < opts.tsa_layers; ++i) tsa.emplace_back(pf.sub("tsa" + std::to_string(i)), cfg, grid);
  }
  if (opts.use_cma) {
    if (opts.tokens == 0) throw ConfigError("tokens (P) must be at least 1");
    for (std::size_t m = 0; m < modalities; ++m) {
      learners.emplace_back(pf.sub("token_learner" + std::to_string(m)), cfg.dim, opts.tokens);
    }
    cma.emplace(pf.sub("cma"), cfg);
  }
}

TokenSeq Nmafa::forward(const std::vector<Var>& features) const {
  const TokenSeq embedded = embed.forward(features);
  TokenSeq x = embedded;
  for (const auto& block : tsa) x = block.forward(x);
  if (cma) {
    std::vector<Var> banks;
    banks.reserve(features.size());
    for (std::size_t m = 0; m < features.size(); ++m) banks.push_back(learners[m].forward(features[m]));
    x = cma->forward(x, spatial_concat(banks), &embedded);
  }
  return x;
}

}  // namespace nf
