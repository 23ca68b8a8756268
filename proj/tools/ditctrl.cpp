#include "ditctrl/cli.hpp"

int main(int argc, char** argv) { return ditctrl::cli::run(argc, argv); }
