#include "cmtmae/cli.hpp"

int main(int argc, char** argv) { return cmtmae::run_cli(argc, argv); }
