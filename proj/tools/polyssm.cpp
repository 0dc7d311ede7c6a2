#include <iostream>

#include "polyssm/pipeline.hpp"

int main(int argc, char** argv) {
    return polyssm::pipeline::run_cli(argc, argv, std::cout, std::cerr);
}
