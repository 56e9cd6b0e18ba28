// SPDX-License-Identifier: Apache-2.0

#include "necs/cli.hpp"

int main(int argc, char** argv) { return necs::cli::main(argc, argv); }
