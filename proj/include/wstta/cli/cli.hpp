#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace wstta::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kRuntime = 2, kGateFailed = 3 };

/// Entry point of the `wstta` tool. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wstta::cli
