#include <iostream>

#include "dadrop/cli.hpp"

int main(int argc, char** argv) { return dadrop::cli::run(argc, argv, std::cout, std::cerr); }
