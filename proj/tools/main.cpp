#include "deltavit/cli.hpp"

int main(int argc, char** argv) { return deltavit::cli_main(argc, argv); }
