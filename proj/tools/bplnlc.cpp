#include "bplnlc/cli.hpp"

int main(int argc, char** argv) { return bplnlc::cli::run(argc, argv); }
