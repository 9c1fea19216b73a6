#include "qdr/cli.hpp"

int main(int argc, char** argv) { return qdr::run_cli(argc, argv); }
