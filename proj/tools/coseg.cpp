#include <iostream>

#include "coseg/cli.hpp"

int main(int argc, char** argv) { return coseg::cli::main({argv, argv + argc}, std::cout, std::cerr); }
