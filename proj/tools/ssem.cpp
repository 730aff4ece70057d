#include <iostream>

#include "ssem/cli.hpp"

int main(int argc, char** argv) { return ssem::cli::cli_dispatch(argc, argv, std::cout, std::cerr); }
