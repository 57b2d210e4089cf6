#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace convsst {

/// Entry point of the `convsst` tool. `args` excludes the program name.
/// Results go to `out`, diagnostics and progress to `err`; returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace convsst
