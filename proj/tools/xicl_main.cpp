#include "xicl/cli.hpp"

int main(int argc, char** argv) { return xicl::cli::run(argc, argv); }
