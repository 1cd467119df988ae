#include "sdcl/cli.hpp"

int main(int argc, char** argv) { return sdcl::cli::run(argc, argv); }
