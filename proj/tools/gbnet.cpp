#include "gbnet/cli.hpp"

int main(int argc, char** argv) { return gbnet::cli::run(argc, argv); }
