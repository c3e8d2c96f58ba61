#include <iostream>
#include <string>
#include <vector>

#include "wstta/cli/cli.hpp"

int main(int argc, char** argv) {
  return wstta::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
