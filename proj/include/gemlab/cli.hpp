#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gemlab::cli {

/// Runs one command line (argv[0] is the program name). Returns the process
/// exit code: 0 success, 1 usage/config/data error, 2 contract or freeze
/// violation, 3 numeric failure. Diagnostics go to err as single lines.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace gemlab::cli
