// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nestedformer/tensor.hpp"

namespace nf {

/// M co-registered scalar volumes sharing extents D x H x W. Each modality is
/// a contiguous z-major block (z, then y, then x fastest).
struct MultiModalVolume {
  std::size_t modalities = 0;
  std::array<std::size_t, 3> extents{0, 0, 0};  // D, H, W
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> data;

  MultiModalVolume() = default;
  MultiModalVolume(std::size_t m, std::array<std::size_t, 3> ext);

  std::size_t voxels() const { return extents[0] * extents[1] * extents[2]; }
  std::span<float> modality(std::size_t i);
  std::span<const float> modality(std::size_t i) const;
  void validate() const;
};

struct SegmentationMask {
  std::size_t classes = 0;
  std::array<std::size_t, 3> extents{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;

  SegmentationMask() = default;
  SegmentationMask(std::size_t n_classes, std::array<std::size_t, 3> ext);

  std::size_t voxels() const { return extents[0] * extents[1] * extents[2]; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * extents[1] + y) * extents[2] + x; }
  void validate() const;
  // [voxels, classes] one-hot view.
  Tensor one_hot() const;
};

struct Ellipsoid {
  std::uint8_t label = 0;
  std::array<double, 3> center{};  // voxel coordinates (z, y, x)
  std::array<double, 3> radii{};
  // Voxel centre test: sum(((p - c) / r)^2) <= 1.
  bool contains(std::size_t z, std::size_t y, std::size_t x) const;
};

struct PhantomSpec {
  std::array<std::size_t, 3> extents{32, 32, 32};
  std::size_t modalities = 2;
  std::size_t classes = 3;
  std::size_t objects_per_class = 1;
  double radius_min = 3.0;
  double radius_max = 6.0;
  // visibility[i][c]: contrast of class c in modality i. Empty selects the
  // complementary default where foreground class c shows only in modality
  // (c - 1) mod M.
  std::vector<std::vector<double>> visibility;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 2000;

  std::vector<std::vector<double>> resolved_visibility() const;
  void validate() const;
};

struct Phantom {
  MultiModalVolume volume;
  SegmentationMask mask;
  std::vector<Ellipsoid> objects;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

// Non-overlapping axis-aligned ellipsoids per class; modality i intensity is
// sum_c visibility[i][c] * indicator_c + N(0, sigma^2). Deterministic per seed.
Phantom generate_phantom(const PhantomSpec& spec);

void write_mmv(const std::filesystem::path& path, const MultiModalVolume& v);
MultiModalVolume read_mmv(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const SegmentationMask& m);
SegmentationMask read_mask(const std::filesystem::path& path);

// Per-modality z-score over nonzero voxels; zero-variance modalities map to zeros.
MultiModalVolume normalize(const MultiModalVolume& v);

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
  std::vector<std::string> warnings;
};
DatasetSplit split_dataset(std::size_t count, const std::array<double, 3>& fractions, std::uint64_t seed);

struct Case {
  std::string id;
  MultiModalVolume volume;
  SegmentationMask mask;
};
using Dataset = std::vector<Case>;

// Case i uses seed spec.seed + i.
Dataset generate_dataset(const PhantomSpec& spec, std::size_t count, std::size_t threads = 1);
// Layout: <dir>/case_<idx>/volume.mmv, mask.msk, meta.json
void write_dataset(const std::filesystem::path& dir, const Dataset& cases, const PhantomSpec& spec);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace nf
