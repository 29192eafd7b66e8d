#include "cxrmt/cli.hpp"

int main(int argc, char** argv) { return cxrmt::cli_dispatch(argc, argv); }
