#include <iostream>

#include "nero/cli.hpp"

int main(int argc, char** argv) { return nero::run_cli(argc, argv, std::cout, std::cerr); }
