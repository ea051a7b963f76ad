#include "whitebed/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return whitebed::cli_main(argc, argv, std::cout, std::cerr); }
