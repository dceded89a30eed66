#include "refseg/cli.hpp"

int main(int argc, char** argv) { return refseg::cli_main(argc, argv); }
