#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace soundprobe::cli {

enum ExitCode : int { ok = 0, failure = 1, usage = 2 };

/// Runs one command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace soundprobe::cli
