#include "organrag/cli.hpp"

int main(int argc, char** argv) { return organrag::cli::run(argc, argv); }
