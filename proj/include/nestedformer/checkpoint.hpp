// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>

#include "nestedformer/model.hpp"
#include "nestedformer/optimizer.hpp"

namespace nf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: "NFCK", u32 version, u32 length + UTF-8 JSON header
// ({"model": ModelConfig, "step": n, "optimizer": bool}), u32 tensor count,
// then per tensor: u16 name length + name, u8 rank, u32 extents, float32 LE
// values. Optimizer moments are stored as tensors named optim.m.<param> and
// optim.v.<param>.
void save_checkpoint(const std::filesystem::path& path, const NestedFormer& model, const OptimState* optim = nullptr);

struct LoadedCheckpoint {
  NestedFormer model;
  std::optional<OptimState> optim;
  std::uint64_t step = 0;
};

// When `expected` is given and differs from the stored configuration the load
// fails with a ConfigError, unless `force_config` is set, in which case the
// stored configuration is used.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr,
                                 bool force_config = false);

}  // namespace nf
