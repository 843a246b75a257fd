#include "empf/cli.hpp"

int main(int argc, char** argv) { return empf::cli::run_cli(argc, argv); }
