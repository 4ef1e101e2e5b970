#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace metagpt::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsage = 1,
  kDataError = 2,
  kInvariantViolation = 3,
};

/// Runs one command line (without the program name). Machine-readable JSON
/// goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace metagpt::cli
