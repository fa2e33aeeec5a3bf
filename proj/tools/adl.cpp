#include "adl/app.hpp"

int main(int argc, char** argv) { return adl::run_cli(argc, argv); }
