#include "soundprobe/cli.hpp"

int main(int argc, char** argv) { return soundprobe::cli::run(argc, argv); }
