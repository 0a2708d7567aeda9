// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/decoder.hpp"

namespace nf {

void DecoderConfig::validate() const {
  for (auto c : level_channels) {
    if (c == 0) throw ConfigError("decoder.level_channels: every entry must be positive");
  }
  if (out_classes < 2) throw ConfigError("decoder.out_classes must be at least 2");
}

Var fold_tokens(const TokenSeq& seq) {
  if (!seq.grid) throw ContractError("fold_tokens: sequence has no grid");
  const Grid& g = *seq.grid;
  if (seq.tokens.shape().size() != 2 || g.volume() != seq.length()) {
    throw DimensionError("fold_tokens: grid " + to_string(g) + " does not match tokens " +
                         to_string(seq.tokens.shape()));
  }
  return ops::reshape(seq.tokens, {g.z, g.y, g.x, seq.channels()});
}

TokenSeq flatten_volume(const Var& volume) {
  if (volume.shape().size() != 4) throw DimensionError("flatten_volume: expected [z,y,x,C], got " + to_string(volume.shape()));
  const Shape& s = volume.shape();
  return {ops::reshape(volume, {s[0] * s[1] * s[2], s[3]}), Grid{s[0], s[1], s[2]}};
}

ModalitySensitiveGating::ModalitySensitiveGating(ParamFactory pf, std::size_t channels, std::size_t modalities)
    : modalities_(modalities) {
  for (std::size_t l = 1; l <= kSkipLevels; ++l) fc.emplace_back(pf.sub("fc" + std::to_string(l)), channels, modalities);
}

Var ModalitySensitiveGating::importance(const TokenSeq& fused, std::size_t level) const {
  if (level < 1 || level > kSkipLevels) throw ContractError("msg_importance: level must be in 1..4");
  const Var logits = fc[level - 1](fold_tokens(fused));
  return ops::sigmoid(ops::upsample2x(logits, kSkipLevels + 1 - level));
}

Var msg_filter(const Var& importance, const std::vector<Var>& features) {
  if (features.empty()) throw DimensionError("msg_filter: no modality features");
  if (importance.shape().size() != 4 || importance.shape()[3] != features.size()) {
    throw DimensionError("msg_filter: importance " + to_string(importance.shape()) + " for " +
                         std::to_string(features.size()) + " modalities");
  }
  Var total;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Shape& f = features[i].shape();
    if (f.size() != 4 || f[0] != importance.shape()[0] || f[1] != importance.shape()[1] || f[2] != importance.shape()[2]) {
      throw DimensionError("msg_filter: feature " + to_string(f) + " does not match importance " +
                           to_string(importance.shape()));
    }
    const Var gated = ops::mul_gate(features[i], ops::slice_last(importance, i, 1));
    total = i == 0 ? gated : ops::add(total, gated);
  }
  return total;
}

ConcatSkip::ConcatSkip(ParamFactory pf, std::size_t modalities, std::size_t channels)
    : proj(pf.sub("proj"), modalities * channels, channels) {}

Var ConcatSkip::forward(const std::vector<Var>& features) const {
  return proj(features.size() == 1 ? features[0] : ops::concat_last(features));
}

Decoder::Decoder(ParamFactory pf, const DecoderConfig& cfg, std::size_t bottleneck_channels,
                 const std::array<std::size_t, kSkipLevels>& skip_channels)
    : cfg_(cfg) {
  cfg.validate();
  std::size_t cin = bottleneck_channels;
  for (std::size_t i = 0; i < kSkipLevels; ++i) {
    const std::size_t level = kSkipLevels - i;
    const std::size_t cout = cfg.level_channels[i];
    stages.emplace_back(pf.sub("level" + std::to_string(level)), cin + skip_channels[level - 1], cout, 3, 1, 1);
    cin = cout;
  }
  head = Conv3d(pf.sub("head"), cin, cfg.out_classes, 1, 1, 0);
}

Var Decoder::decode(const Var& bottleneck, const std::vector<Var>& skips) const {
  if (skips.size() != kSkipLevels) throw DimensionError("decode: expected 4 skip features (levels 4..1)");
  Var x = bottleneck;
  for (std::size_t i = 0; i < kSkipLevels; ++i) {
    x = ops::upsample2x(x, 1);
    const Shape& s = skips[i].shape();
    if (s.size() != 4 || s[0] != x.shape()[0] || s[1] != x.shape()[1] || s[2] != x.shape()[2]) {
      throw DimensionError("decode: skip for level " + std::to_string(kSkipLevels - i) + " has shape " + to_string(s) +
                           ", expected spatial extents of " + to_string(x.shape()));
    }
    x = ops::gelu(stages[i](ops::concat_last({x, skips[i]})));
  }
  return head(x);
}

}  // namespace nf
