#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vinpaint::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kIo = 2, kNumeric = 3 };

/// Runs one subcommand. `args` excludes the program name. Diagnostics go to
/// `err`, the resolved configuration and results to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vinpaint::cli
