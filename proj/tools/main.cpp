#include "knowfree/cli.hpp"

int main(int argc, char** argv) { return knowfree::cli::run_cli(argc, argv); }
