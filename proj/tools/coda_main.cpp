#include "coda/cli.hpp"

int main(int argc, char** argv) { return coda::run_cli(argc, argv); }
