#include "cytr/cli.hpp"

int main(int argc, char** argv) { return cytr::cli::run(argc, argv); }
