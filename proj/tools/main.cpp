// Copyright (c) 2026 The NestedFormer-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "nestedformer/cli.hpp"

int main(int argc, char** argv) { return nf::run_cli(argc, argv); }
