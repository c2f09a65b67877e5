#include "consolidate/cli.hpp"

int main(int argc, char** argv) { return consolidate::cli::run(argc, argv); }
