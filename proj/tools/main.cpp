#include <iostream>

#include "vo2lgm/cli.hpp"

int main(int argc, char** argv) { return vo2lgm::run_cli(argc, argv, std::cout, std::cerr); }
