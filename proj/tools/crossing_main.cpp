#include <iostream>
#include <string>
#include <vector>

#include "crossing/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crossing::harness::run_command(args, std::cout, std::cerr);
}
