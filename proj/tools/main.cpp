#include "settx/bench.hpp"
#include "settx/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  settx::retain_freed_memory();
  return settx::run_cli(argc, argv, std::cout, std::cerr);
}
