#include <iostream>
#include <string>
#include <vector>

#include "gemlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return gemlab::cli::run(args, std::cout, std::cerr);
}
