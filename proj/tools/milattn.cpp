#include "milattn/cli.hpp"

int main(int argc, char** argv) { return milattn::cli::run(argc, argv); }
