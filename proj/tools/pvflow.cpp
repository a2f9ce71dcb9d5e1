// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "pvflow/cli.hpp"

int main(int argc, char** argv) {
  return pvflow::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
