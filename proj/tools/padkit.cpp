#include <iostream>

#include "padkit/cli.hpp"

int main(int argc, char** argv) { return padkit::cli::main_entry(argc, argv, std::cout, std::cerr); }
