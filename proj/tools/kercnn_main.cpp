#include "kercnn/cli.hpp"

int main(int argc, char** argv) { return kercnn::run_cli(argc, argv); }
