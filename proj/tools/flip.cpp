#include "flip/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return flip::run_cli(argc, argv, std::cout, std::cerr); }
