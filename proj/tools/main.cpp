#include "pvseg/cli.hpp"

int main(int argc, char** argv) { return pvseg::run_cli(argc, argv); }
