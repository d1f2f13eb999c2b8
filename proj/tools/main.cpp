#include "gdkvm/cli.hpp"

int main(int argc, char** argv) { return gdkvm::dispatch(argc, argv); }
