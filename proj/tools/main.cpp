#include "dexmoe/cliapp.hpp"

int main(int argc, char** argv) { return dexmoe::cli_main(argc, argv); }
