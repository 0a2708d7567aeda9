// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nestedformer/data.hpp"
#include "nestedformer/decoder.hpp"
#include "nestedformer/encoder.hpp"
#include "nestedformer/fusion.hpp"

namespace nf {

struct ModelConfig {
  std::size_t modalities = 4;
  std::size_t classes = 3;
  std::array<std::size_t, 3> extents{128, 128, 128};
  EncoderConfig encoder;
  AttentionConfig attention;
  DecoderConfig decoder;  // out_classes follows `classes`
  std::size_t tokens = 32;
  std::size_t tsa_layers = 2;
  // Ablation switches.
  bool use_tsa = true;
  bool use_cma = true;
  bool use_msg = true;
  std::uint64_t seed = 0;

  void validate() const;
  Grid bottleneck_grid() const;

  // Four modalities, 128-wide bottleneck, defaults everywhere else.
  static ModelConfig brats();
  // Reduced widths for CPU experiments on 16^3 / 32^3 volumes.
  static ModelConfig toy(std::size_t modalities, std::size_t classes, std::array<std::size_t, 3> extents,
                         std::size_t width = 16);
};

struct ParamBreakdown {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> modules;  // top-level groups, in build order
  std::vector<std::pair<std::string, std::size_t>> details;  // second-level groups
};

/// Per-modality encoders, the fusion bottleneck, skip gating and the decoder.
class NestedFormer {
 public:
  // Xavier-initialised from cfg.seed, then rounded to storage precision.
  explicit NestedFormer(const ModelConfig& cfg);
  NestedFormer(NestedFormer&&) noexcept = default;
  NestedFormer& operator=(NestedFormer&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }

  // [D, H, W, N_c] logits.
  Var forward(const MultiModalVolume& x) const;
  // One [D, H, W, 1] tensor per modality.
  Var forward(const std::vector<Var>& modalities) const;

  ParamBreakdown count_params() const;

  const ModalityEncoder& encoder(std::size_t m) const { return encoders_.at(m); }
  const Nmafa& fusion() const { return *nmafa_; }
  const Decoder& decoder() const { return *decoder_; }
  const ModalitySensitiveGating* gating() const { return msg_ ? &*msg_ : nullptr; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  std::vector<ModalityEncoder> encoders_;
  std::unique_ptr<Nmafa> nmafa_;
  std::optional<ModalitySensitiveGating> msg_;
  std::vector<ConcatSkip> concat_skips_;  // levels 4..1 when gating is off
  std::unique_ptr<Decoder> decoder_;
};

// Modality volumes as [D, H, W, 1] constants.
std::vector<Var> modality_inputs(const MultiModalVolume& x);

enum class AttentionMode { full, tsa };
AttentionMode attention_mode_from_string(const std::string& name);

// Score-matrix entries per head and per layer. full: N^2. tsa: N*z + N*(y*x)
// + N*(window volume).
std::uint64_t attention_cost(const Grid& grid, const std::array<std::size_t, 3>& window, AttentionMode mode);

// Multiply-add based estimate (2 FLOPs per MAC) of one forward pass.
double estimate_flops(const ModelConfig& cfg);

}  // namespace nf
