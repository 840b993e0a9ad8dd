#include <iostream>

#include "mtunet/commands.hpp"

int main(int argc, char** argv) { return mtunet::run_cli(argc, argv, std::cout, std::cerr); }
