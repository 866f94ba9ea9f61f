#include "csvd/cli.hpp"

int main(int argc, char** argv) { return csvd::run_cli(argc, argv); }
