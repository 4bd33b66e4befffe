#include <iostream>

#include "avw2/cli.h"

int main(int argc, char** argv) {
  return avw2::runCli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
