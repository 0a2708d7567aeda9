// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <memory>
#include <vector>

#include "nestedformer/params.hpp"

namespace nf {

inline constexpr std::size_t kPyramidLevels = 5;

// Token mixer used inside each encoder stage. gpb is the global-pooling block;
// pb (average-pool Poolformer) and cnn exist for ablations.
enum class EncoderKind { gpb, pb, cnn };

const char* to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& name);

struct EncoderConfig {
  std::array<std::size_t, kPyramidLevels> stage_channels{32, 64, 128, 128, 128};
  std::size_t gpb_per_stage = 2;
  std::size_t mlp_ratio = 4;
  std::size_t in_channels = 1;
  EncoderKind kind = EncoderKind::gpb;

  void validate() const;
};

// Level l (1-based) has spatial extents (D,H,W) / 2^(l-1).
struct FeaturePyramid {
  std::array<Var, kPyramidLevels> levels;
  const Var& level(std::size_t l) const { return levels.at(l - 1); }
};

class EncoderBlock {
 public:
  virtual ~EncoderBlock() = default;
  virtual Var forward(const Var& x) const = 0;
};

// Y = GP(LN(X)) W_g + X,  Z = MLP(LN(Y)) + Y, with GP the spatial mean.
class GlobalPoolformerBlock : public EncoderBlock {
 public:
  GlobalPoolformerBlock(ParamFactory pf, std::size_t channels, std::size_t mlp_ratio);
  Var forward(const Var& x) const override;

  LayerNorm norm1;
  Linear pool_proj;
  LayerNorm norm2;
  Mlp mlp;
};

// Y = X + (AvgPool3(LN(X)) - LN(X)),  Z = MLP(LN(Y)) + Y.
class PoolformerBlock : public EncoderBlock {
 public:
  PoolformerBlock(ParamFactory pf, std::size_t channels, std::size_t mlp_ratio);
  Var forward(const Var& x) const override;

  LayerNorm norm1;
  LayerNorm norm2;
  Mlp mlp;
};

// Z = X + Conv3(GELU(Conv3(LN(X)))), 3x3x3 convolutions with unit padding.
class ConvBlock : public EncoderBlock {
 public:
  ConvBlock(ParamFactory pf, std::size_t channels);
  Var forward(const Var& x) const override;

  LayerNorm norm;
  Conv3d conv1, conv2;
};

/// One modality's encoder: five stages of feature embedding followed by
/// `gpb_per_stage` mixing blocks.
class ModalityEncoder {
 public:
  ModalityEncoder(ParamFactory pf, const EncoderConfig& cfg);

  // stage is 1-based. Stage 1 is a 1x1x1 convolution; stages 2-5 are 2x2x2
  // stride-2 patch embeddings that halve every spatial extent.
  Var feature_embed(const Var& x, std::size_t stage) const;
  const EncoderBlock& block(std::size_t stage, std::size_t index) const { return *blocks_.at(stage - 1).at(index); }

  // volume: [D, H, W, in_channels] with D, H, W divisible by 16.
  FeaturePyramid encode(const Var& volume) const;

 private:
  EncoderConfig cfg_;
  std::vector<Conv3d> embeds_;
  std::vector<std::vector<std::unique_ptr<EncoderBlock>>> blocks_;
};

}  // namespace nf
