// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace nf {

// Runs body(i) for i in [0, n) on up to `threads` workers. Indices are handed
// out in order; the first exception thrown by any body is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

// --threads value, falling back to NF_THREADS, then 1.
std::size_t resolve_threads(std::size_t requested);

}  // namespace nf
