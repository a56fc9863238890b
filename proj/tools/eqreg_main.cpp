#include <iostream>
#include <string>
#include <vector>

#include "eqreg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return eqreg::run_cli(args, std::cout, std::cerr);
}
