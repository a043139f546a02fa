// SPDX-License-Identifier: Apache-2.0
#include "sop2/cli.hpp"

int main(int argc, char** argv) { return sop2::run_cli(argc, argv); }
