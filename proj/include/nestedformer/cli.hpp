// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nf {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes: 0 success, 1 invalid input (flags, configuration, files), 2 runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace nf
