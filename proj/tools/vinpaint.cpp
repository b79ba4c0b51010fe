#include <iostream>

#include "vinpaint/cli.hpp"

int main(int argc, char** argv) {
    return vinpaint::cli::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
