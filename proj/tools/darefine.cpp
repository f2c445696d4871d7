#include <darefine/cli.hpp>

int main(int argc, char** argv) { return darefine::cli::run(argc, argv); }
