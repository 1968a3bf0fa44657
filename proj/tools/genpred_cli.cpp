#include <iostream>

#include "genpred/cli.hpp"

int main(int argc, char** argv) { return genpred::cli::run_subcommand(argc, argv, std::cout, std::cerr); }
