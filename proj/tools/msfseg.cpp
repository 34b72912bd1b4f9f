#include <iostream>

#include "msfseg/cli.hpp"

int main(int argc, char** argv) {
    return msf::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
