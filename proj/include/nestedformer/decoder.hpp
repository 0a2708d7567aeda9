// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <vector>

#include "nestedformer/fusion.hpp"

namespace nf {

inline constexpr std::size_t kSkipLevels = 4;

struct DecoderConfig {
  // Output widths of the decoding stages for levels 4, 3, 2, 1.
  std::array<std::size_t, kSkipLevels> level_channels{128, 64, 64, 32};
  std::size_t out_classes = 3;

  void validate() const;
};

// Tokens [N, C] with grid (z, y, x) back to a [z, y, x, C] volume.
Var fold_tokens(const TokenSeq& seq);
// Inverse of fold_tokens.
TokenSeq flatten_volume(const Var& volume);

/// Per-level modality importance maps learned from the fused bottleneck and
/// used to gate the encoder skip features.
class ModalitySensitiveGating {
 public:
  ModalitySensitiveGating(ParamFactory pf, std::size_t channels, std::size_t modalities);

  // I_l = sigmoid(up^(5-l)(FC(fold(fused)))), shape [D_l, H_l, W_l, M], l in 1..4.
  Var importance(const TokenSeq& fused, std::size_t level) const;

  std::vector<Linear> fc;  // one C -> M map per level, index l-1

 private:
  std::size_t modalities_;
};

// sum_i I_l[..., i] * F_{l,i}
Var msg_filter(const Var& importance, const std::vector<Var>& features);

/// Skip merge used when gating is disabled: pointwise linear map of the
/// channel-concatenated modality features.
class ConcatSkip {
 public:
  ConcatSkip(ParamFactory pf, std::size_t modalities, std::size_t channels);
  Var forward(const std::vector<Var>& features) const;

  Linear proj;
};

/// Upsample, concatenate the skip, 3x3x3 convolution, GELU; per level 4..1,
/// then a 1x1x1 head producing class logits.
class Decoder {
 public:
  // skip_channels[l-1] is the width of level-l skip features.
  Decoder(ParamFactory pf, const DecoderConfig& cfg, std::size_t bottleneck_channels,
          const std::array<std::size_t, kSkipLevels>& skip_channels);

  // skips ordered level 4, 3, 2, 1.
  Var decode(const Var& bottleneck, const std::vector<Var>& skips) const;

  std::vector<Conv3d> stages;
  Conv3d head;

 private:
  DecoderConfig cfg_;
};

}  // namespace nf
