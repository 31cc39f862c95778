#include "covsda/cli.hpp"

int main(int argc, char** argv) { return covsda::cli::main(argc, argv); }
