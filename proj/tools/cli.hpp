#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dept::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

// Runs one `dept` command. args[0] is the program name.
// Diagnostics go to `err`, progress and summaries to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args);

}  // namespace dept::cli
