#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace grit::cli {

/// Runs one subcommand (prepare, train, eval, sweep, analyze-groups,
/// analyze-timeline). Returns the process exit code: 0 success, 1 usage
/// error, 2 data error, 3 runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// argv[0] is skipped.
int run(int argc, char** argv);

}  // namespace grit::cli
