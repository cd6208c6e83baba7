#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace msd {

/// Stable process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitConfig = 2,
  kExitTrainingFailed = 3,
  kExitIo = 4,
};

/// Runs the `msd` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msd
