#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace msf {

/// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or missing inputs.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Subcommands: generate, train, propagate, evaluate, serve. `args` excludes the
/// program name. Every option may also come from `--config file.json`, whose keys
/// are the option names with underscores; flags on the command line win.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msf
