#include <iostream>

#include "ftp/cli.hpp"

int main(int argc, char** argv) { return ftp::cli::run_cli(argc, argv, std::cout, std::cerr); }
