#include <iostream>

#include "kblink/cli.hpp"

int main(int argc, char** argv) {
    return kblink::cli::run_cli(argc, argv, std::cout, std::cerr);
}
