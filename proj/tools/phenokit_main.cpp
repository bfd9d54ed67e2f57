#include <vector>
#include <string>

#include "phenokit/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return phenokit::run_command(args);
}
