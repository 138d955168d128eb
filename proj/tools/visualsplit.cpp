#include "visualsplit/cli.hpp"

int main(int argc, char** argv) { return vsplit::cli::run(argc, argv); }
