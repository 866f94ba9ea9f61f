#pragma once

#include <string>
#include <vector>

namespace csvd {

/// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitViolation = 1,
  kExitUsage = 2,
  kExitIo = 3,
};

int run_cli(int argc, const char* const* argv);
/// args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace csvd
