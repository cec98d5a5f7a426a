#include "swinlab/cli.hpp"

int main(int argc, char** argv) { return swinlab::run_cli(argc, argv); }
