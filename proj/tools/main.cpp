#include "cli.hpp"

int main(int argc, char** argv) { return smeood::cli::run(argc, argv); }
