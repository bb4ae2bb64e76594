#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pbp::cli {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumeric = 2, kExitIo = 3 };

// Runs one `pbprompt` command. `args` excludes the program name. Results go
// to `out`, progress and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Command-line flag for each RunConfig field, e.g. "--base-lr" for
// "base_lr" and "--sinkhorn-tol" for sinkhorn.tol.
std::vector<std::string> config_flag_names();

}  // namespace pbp::cli
