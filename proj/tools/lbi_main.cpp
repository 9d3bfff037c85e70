#include <CLI11.hpp>

#include "lbi/cli.hpp"

int main(int argc, char** argv) { return lbi::cli::run(argc, argv); }
