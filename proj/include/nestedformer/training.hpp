// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nestedformer/losses.hpp"
#include "nestedformer/model.hpp"
#include "nestedformer/optimizer.hpp"

namespace nf {

struct TrainConfig {
  AdamWConfig optim;
  std::size_t steps = 500;
  std::size_t batch_size = 1;  // samples accumulated per optimizer step
  std::uint64_t seed = 0;
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
  std::size_t val_interval = 0;         // 0 disables periodic validation
  std::size_t checkpoint_interval = 0;  // 0 writes only the final checkpoint
  bool normalize_inputs = true;
  // When false, wall_ms is logged as 0 so logs of repeated runs compare equal.
  bool record_wall_time = true;

  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double dice_loss = 0.0;
  double ce_loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct ValidationRecord {
  std::size_t step = 0;
  double dice = 0.0;  // mean foreground Dice over the validation cases
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::vector<ValidationRecord> validation;
  bool aborted = false;
  std::string abort_reason;
  std::optional<std::filesystem::path> last_checkpoint;
};

// Optional outputs of a run. With `dir` set, writes <dir>/train_log.jsonl,
// <dir>/validation.jsonl and checkpoints <dir>/checkpoint_<step>.nfck plus
// <dir>/final.nfck.
struct TrainOutputs {
  std::optional<std::filesystem::path> dir;
  std::function<void(const StepRecord&)> on_step;
};

// Continues from `state` (fresh when empty). Sample order follows a seeded
// permutation per epoch. A non-finite loss or gradient stops the run; the
// parameters and the checkpoint on disk then reflect the last good step.
TrainResult train(NestedFormer& model, OptimState& state, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset* val_set = nullptr, const TrainOutputs& outputs = {});

std::string to_jsonl(const StepRecord& r);

// Order in which samples are visited by `train`.
std::vector<std::size_t> sample_order(std::size_t dataset_size, std::size_t samples, std::uint64_t seed);

struct AblationVariant {
  std::string name;
  std::string description;
  EncoderKind encoder = EncoderKind::gpb;
  bool use_tsa = true;
  bool use_cma = true;
  bool use_msg = true;

  ModelConfig apply(ModelConfig cfg) const;
};

// baseline1, baseline2, tsa, tsa_cma, pb_swap, full.
const std::vector<AblationVariant>& ablation_registry();
const AblationVariant& find_ablation(const std::string& name);

}  // namespace nf
