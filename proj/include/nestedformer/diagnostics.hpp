// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nestedformer/grad_check.hpp"
#include "nestedformer/training.hpp"

namespace nf {

struct GradCheckRow {
  std::string block;
  std::string shape;
  GradCheckResult result;
  bool pass = false;
  double seconds = 0.0;
};

// Finite-difference checks of every differentiable block on three random toy
// shapes each, then one end-to-end check of the whole model through the loss.
// Only the "toy" scale exists.
std::vector<GradCheckRow> run_gradcheck_suite(const std::string& scale, std::uint64_t seed = 7,
                                              double tolerance = 1e-4,
                                              const std::function<void(const GradCheckRow&)>& on_row = {});

struct AttentionBench {
  Grid grid;
  std::array<std::size_t, 3> window{2, 2, 2};
  std::uint64_t full_closed = 0, tsa_closed = 0;    // cost model
  std::uint64_t full_counted = 0, tsa_counted = 0;  // kernel logit counters, per head
  double full_ms = 0.0, tsa_ms = 0.0;               // best of `repeats`
};

// Times the attention kernel on random projections: one global group versus
// the axial, planar and window groups summed.
AttentionBench bench_attention(const Grid& grid, const std::array<std::size_t, 3>& window, std::size_t dim = 32,
                               std::size_t heads = 4, std::size_t repeats = 3, std::uint64_t seed = 0);

std::string attention_bench_csv_header();
std::string to_csv_row(const AttentionBench& b);

struct AblationOptions {
  ModelConfig base;
  TrainConfig train;
  Dataset train_set;
  Dataset val_set;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants{"baseline2", "tsa", "tsa_cma", "full"};
};

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  double val_dice = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

struct AblationSummary {
  std::string variant;
  double mean_dice = 0.0;
  std::size_t rank = 0;  // 1 = best
};

// Seed s initialises the model with s and shuffles training samples with s.
std::vector<AblationRun> run_ablation(const AblationOptions& opts,
                                      const std::function<void(const AblationRun&)>& on_run = {});
std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRun>& runs);

}  // namespace nf
