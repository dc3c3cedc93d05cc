#include "altcast/cli.hpp"

int main(int argc, char** argv) { return altcast::run_cli(argc, argv); }
