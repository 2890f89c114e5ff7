// ssrb command-line entry point; subcommands are filled in by the harness.
#include <cstdio>

#include "ssrb/cli.hpp"

int main(int argc, char** argv) { return ssrb::cli_main(argc, argv); }
