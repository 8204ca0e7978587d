#include <iostream>
#include <string>
#include <vector>

#include "kepil/cli/commands.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return kepil::cli::dispatch(args, std::cout, std::cerr);
}
