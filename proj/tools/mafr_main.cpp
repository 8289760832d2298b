#include "mafr/cli.hpp"

int main(int argc, char** argv) { return mafr::cli::run(argc, argv); }
