// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "nestedformer/data.hpp"
#include "nestedformer/ops.hpp"

namespace nf {

inline constexpr double kDiceSmooth = 1e-5;

// 1 - mean_c (2 sum p_c g_c + s) / (sum p_c + sum g_c + s), p = softmax(logits).
// logits [..., N_c] with as many positions as the mask has voxels.
Var soft_dice_loss(const Var& logits, const SegmentationMask& target, double smooth = kDiceSmooth);

// Mean over voxels of -log softmax(logits)[label].
Var cross_entropy_loss(const Var& logits, const SegmentationMask& target);

struct LossTerms {
  Var total;  // lambda_dice * dice + lambda_ce * ce
  double dice = 0.0;
  double ce = 0.0;
};

LossTerms combined_loss(const Var& logits, const SegmentationMask& target, double lambda_dice, double lambda_ce);

}  // namespace nf
