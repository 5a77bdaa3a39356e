#pragma once

// Command-line entry point: subcommands over every module, a JSON config
// file whose keys mirror the long flags (dashes become underscores), and
// flags that override the config.

#include <iosfwd>
#include <string>
#include <vector>

namespace organrag::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
/// Failures print one JSON error record to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv);

}  // namespace organrag::cli
