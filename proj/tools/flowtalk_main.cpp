#include <string>
#include <vector>

#include "flowtalk/cli.hpp"

int main(int argc, char** argv) {
    return flowtalk::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
