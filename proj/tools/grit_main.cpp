#include "grit/cli.hpp"

int main(int argc, char** argv) { return grit::cli::run(argc, argv); }
