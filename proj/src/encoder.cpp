// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/encoder.hpp"

#include <string>

namespace nf {

const char* to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::gpb: return "gpb";
    case EncoderKind::pb: return "pb";
    case EncoderKind::cnn: return "cnn";
  }
  return "?";
}

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "gpb") return EncoderKind::gpb;
  if (name == "pb") return EncoderKind::pb;
  if (name == "cnn") return EncoderKind::cnn;
  throw ConfigError("encoder: unknown kind '" + name + "' (expected gpb, pb or cnn)");
}

void EncoderConfig::validate() const {
  for (auto c : stage_channels) {
    if (c == 0) throw ConfigError("encoder.stage_channels: every entry must be positive");
  }
  if (mlp_ratio == 0) throw ConfigError("encoder.mlp_ratio must be positive");
  if (in_channels == 0) throw ConfigError("encoder.in_channels must be positive");
}

GlobalPoolformerBlock::GlobalPoolformerBlock(ParamFactory pf, std::size_t channels, std::size_t mlp_ratio)
    : norm1(pf.sub("norm1"), channels),
      pool_proj(pf.sub("pool_proj"), channels, channels),
      norm2(pf.sub("norm2"), channels),
      mlp(pf.sub("mlp"), channels, channels * mlp_ratio) {}

Var GlobalPoolformerBlock::forward(const Var& x) const {
  if (x.shape().empty() || x.shape().back() != norm1.gamma.shape()[0]) {
    throw DimensionError("gpb: input " + to_string(x.shape()) + " does not match block width " +
                         std::to_string(norm1.gamma.shape()[0]));
  }
  const Var pooled = pool_proj(ops::global_pool(norm1(x)));
  const Var y = ops::add_lastdim(x, pooled);
  return ops::add(y, mlp(norm2(y)));
}

PoolformerBlock::PoolformerBlock(ParamFactory pf, std::size_t channels, std::size_t mlp_ratio)
    : norm1(pf.sub("norm1"), channels), norm2(pf.sub("norm2"), channels), mlp(pf.sub("mlp"), channels, channels * mlp_ratio) {}

Var PoolformerBlock::forward(const Var& x) const {
  const Var n = norm1(x);
  const Var y = ops::add(x, ops::sub(ops::avg_pool3(n), n));
  return ops::add(y, mlp(norm2(y)));
}

ConvBlock::ConvBlock(ParamFactory pf, std::size_t channels)
    : norm(pf.sub("norm"), channels),
      conv1(pf.sub("conv1"), channels, channels, 3, 1, 1),
      conv2(pf.sub("conv2"), channels, channels, 3, 1, 1) {}

Var ConvBlock::forward(const Var& x) const { return ops::add(x, conv2(ops::gelu(conv1(norm(x))))); }

ModalityEncoder::ModalityEncoder(ParamFactory pf, const EncoderConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  std::size_t cin = cfg.in_channels;
  for (std::size_t s = 0; s < kPyramidLevels; ++s) {
    const std::size_t cout = cfg.stage_channels[s];
    ParamFactory stage = pf.sub("stage" + std::to_string(s + 1));
    if (s == 0) {
      embeds_.emplace_back(stage.sub("embed"), cin, cout, 1, 1, 0);
    } else {
      embeds_.emplace_back(stage.sub("embed"), cin, cout, 2, 2, 0);
    }
    std::vector<std::unique_ptr<EncoderBlock>> blocks;
    for (std::size_t b = 0; b < cfg.gpb_per_stage; ++b) {
      ParamFactory bp = stage.sub("block" + std::to_string(b));
      switch (cfg.kind) {
        case EncoderKind::gpb: blocks.push_back(std::make_unique<GlobalPoolformerBlock>(bp, cout, cfg.mlp_ratio)); break;
        case EncoderKind::pb: blocks.push_back(std::make_unique<PoolformerBlock>(bp, cout, cfg.mlp_ratio)); break;
        case EncoderKind::cnn: blocks.push_back(std::make_unique<ConvBlock>(bp, cout)); break;
      }
    }
    blocks_.push_back(std::move(blocks));
    cin = cout;
  }
}

Var ModalityEncoder::feature_embed(const Var& x, std::size_t stage) const {
  if (stage < 1 || stage > kPyramidLevels) throw ContractError("feature_embed: stage must be in 1..5");
  if (x.shape().size() != 4) throw DimensionError("feature_embed: expected [D,H,W,C], got " + to_string(x.shape()));
  if (stage > 1) {
    for (int a = 0; a < 3; ++a) {
      if (x.shape()[a] % 2 != 0) {
        throw DimensionError("feature_embed: stage " + std::to_string(stage) + " needs even extents, got " +
                             to_string(x.shape()) + "; pad the input upstream so D, H, W are divisible by 16");
      }
    }
  }
  return embeds_[stage - 1](x);
}

FeaturePyramid ModalityEncoder::encode(const Var& volume) const {
  if (volume.shape().size() != 4 || volume.shape()[3] != cfg_.in_channels) {
    throw DimensionError("encode: expected [D,H,W," + std::to_string(cfg_.in_channels) + "], got " +
                         to_string(volume.shape()));
  }
  for (int a = 0; a < 3; ++a) {
    if (volume.shape()[a] % 16 != 0) {
      throw DimensionError("encode: spatial extents must be divisible by 16, got " + to_string(volume.shape()));
    }
  }
  FeaturePyramid pyramid;
  Var x = volume;
  for (std::size_t s = 1; s <= kPyramidLevels; ++s) {
    x = feature_embed(x, s);
    for (const auto& b : blocks_[s - 1]) x = b->forward(x);
    pyramid.levels[s - 1] = x;
  }
  return pyramid;
}

}  // namespace nf
