#include "ddis/cli.hpp"

int main(int argc, char** argv) { return ddis::run_cli(argc, argv); }
