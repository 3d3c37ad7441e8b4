// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/cli.hpp"

int main(int argc, char** argv) { return fl2t::cli::main_entry(argc, argv); }
