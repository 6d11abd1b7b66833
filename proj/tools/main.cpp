#include "cgp/cli.hpp"

int main(int argc, char** argv) { return cgp::cli::dispatch(argc, argv); }
