#include <pivot/cli/app.hpp>

int main(int argc, char** argv) { return pivot::cli::run_cli(argc, argv); }
