// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "nestedformer/data.hpp"
#include "nestedformer/model.hpp"

namespace nf {

inline constexpr double kUndefinedDistance = std::numeric_limits<double>::infinity();

// 2|P n G| / (|P| + |G|) for one label; 1 when both are empty.
double dice_score(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls);

// Foreground voxels of `cls` with a 6-neighbour outside the class or on the volume border.
std::vector<std::array<std::size_t, 3>> boundary_voxels(const SegmentationMask& mask, std::uint8_t cls);

// Linear interpolation between order statistics at rank q * (n - 1).
double percentile_linear(std::vector<double> values, double q);

// Squared Euclidean distance (spacing-scaled) from every voxel to the nearest
// voxel with seed[i] != 0; infinity when there is no seed.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seed,
                                               const std::array<std::size_t, 3>& extents,
                                               const std::array<double, 3>& spacing);

// Max of the two directed 95th percentiles of boundary-to-boundary distances.
// Both empty gives 0; exactly one empty gives kUndefinedDistance.
double hd95(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls,
            const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});
// Same with the maximum in place of the percentile.
double hausdorff(const SegmentationMask& pred, const SegmentationMask& gt, std::uint8_t cls,
                 const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});

// Argmax over the class axis of [D, H, W, N_c] logits.
SegmentationMask argmax_labels(const Tensor& logits, const std::array<std::size_t, 3>& extents);

struct CaseMetrics {
  std::string case_id;
  std::uint8_t cls = 0;
  double dice = 0.0;
  double hd95 = 0.0;  // kUndefinedDistance when exactly one mask is empty
};

struct ClassSummary {
  std::uint8_t cls = 0;
  double mean_dice = 0.0;
  double mean_hd95 = 0.0;  // over cases where it is defined
  std::size_t hd95_defined = 0;
};

struct EvalReport {
  std::vector<CaseMetrics> rows;  // case order, then class order
  std::vector<ClassSummary> classes;
  double mean_dice = 0.0;  // over foreground classes
  double mean_hd95 = 0.0;  // over foreground classes with a defined mean
};

// Metrics for foreground classes 1..N_c-1 of each (prediction, truth) pair.
EvalReport evaluate_masks(const std::vector<SegmentationMask>& predictions, const Dataset& dataset,
                          std::size_t threads = 1);
// Runs the model on every case (normalising inputs when asked) and scores the argmax.
EvalReport evaluate(const NestedFormer& model, const Dataset& dataset, bool normalize_inputs = true,
                    std::size_t threads = 1);

// Header "case,class,dice,hd95"; one row per case and foreground class, then
// one "mean" row per class. Undefined distances are written as "undefined".
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
nlohmann::json report_json(const EvalReport& report);

}  // namespace nf
