#pragma once

#include <iosfwd>

namespace settx {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,      // check failure or runtime error
  kExitConfig = 2,       // bad, missing or unknown configuration key
  kExitNonFinite = 3,    // training aborted on a non-finite loss
};

/// Entry point of the `settx` tool: train, eval, bench, check, gen-data.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace settx
