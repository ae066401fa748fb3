#include <iostream>

#include "pcql/cli/app.hpp"

int main(int argc, char** argv) { return pcql::cli::run(argc, argv, std::cout, std::cerr); }
