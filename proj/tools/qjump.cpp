#include "qjump/cli.hpp"

int main(int argc, char** argv) { return qjump::run_cli(argc, argv); }
