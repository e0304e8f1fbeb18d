#include <iostream>

#include "tense_cli/cli.hpp"

int main(int argc, char** argv) { return tense::cli::run(argc, argv, std::cout, std::cerr); }
