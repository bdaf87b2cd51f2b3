#include "selfplay/cli.hpp"

int main(int argc, char** argv) { return selfplay::run_cli(argc, argv); }
