// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/losses.hpp"

namespace nf {

namespace {

void check_target(const Var& logits, const SegmentationMask& target, const char* op) {
  const Shape& s = logits.shape();
  if (s.empty()) throw DimensionError(std::string(op) + ": logits must have a class axis");
  if (s.back() != target.classes) {
    throw DimensionError(std::string(op) + ": logits have " + std::to_string(s.back()) + " classes, mask has " +
                         std::to_string(target.classes));
  }
  if (logits.value().rows() != target.voxels()) {
    throw DimensionError(std::string(op) + ": logits " + to_string(s) + " do not cover " +
                         std::to_string(target.voxels()) + " voxels");
  }
}

}  // namespace

Var soft_dice_loss(const Var& logits, const SegmentationMask& target, double smooth) {
  check_target(logits, target, "soft_dice_loss");
  const std::size_t nc = target.classes;
  const Var probs = ops::softmax_last(ops::reshape(logits, {target.voxels(), nc}));
  const Var onehot(target.one_hot());
  Tensor g_sum(Shape{nc});
  for (auto l : target.labels) g_sum[l] += 1.0;

  const Var inter = ops::sum_rows(ops::mul(probs, onehot));
  const Var numer = ops::add_scalar(ops::scale(inter, 2.0), smooth);
  const Var denom = ops::add(ops::add_scalar(ops::sum_rows(probs), smooth), Var(std::move(g_sum)));
  return ops::add_scalar(ops::scale(ops::mean(ops::div(numer, denom)), -1.0), 1.0);
}

Var cross_entropy_loss(const Var& logits, const SegmentationMask& target) {
  check_target(logits, target, "cross_entropy_loss");
  return ops::cross_entropy(logits, target.labels);
}

LossTerms combined_loss(const Var& logits, const SegmentationMask& target, double lambda_dice, double lambda_ce) {
  if (lambda_dice < 0.0 || lambda_ce < 0.0) throw ConfigError("loss weights must be nonnegative");
  LossTerms out;
  const Var dice = soft_dice_loss(logits, target);
  const Var ce = cross_entropy_loss(logits, target);
  out.dice = dice.value().item();
  out.ce = ce.value().item();
  out.total = ops::add(ops::scale(dice, lambda_dice), ops::scale(ce, lambda_ce));
  return out;
}

}  // namespace nf
