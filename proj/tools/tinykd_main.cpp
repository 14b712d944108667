// SPDX-License-Identifier: Apache-2.0
#include "tinykd/cli.hpp"

int main(int argc, char** argv) { return tinykd::cli::run(argc, argv); }
