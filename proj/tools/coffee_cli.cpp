// Entry point for the pipeline driver.  All behavior lives in the
// header-only library; this translation unit only forwards argv.

#include "coffee/cli.hpp"

int main(int argc, char** argv) { return coffee::run_cli(argc, argv); }
