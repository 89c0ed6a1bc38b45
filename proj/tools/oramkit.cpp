#include "oramkit/cli.hpp"

int main(int argc, char** argv) { return oramkit::cli::main(argc, argv); }
