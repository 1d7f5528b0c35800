#include "spanparse/cli.hpp"

int main(int argc, char** argv) { return spanparse::cli::run(argc, argv); }
