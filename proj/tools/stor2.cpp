#include <iostream>
#include <string>
#include <vector>

#include "stor2/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return stor2::app::run_cli(args, std::cout, std::cerr);
}
