#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssem::cli {

// Runs one `ssem` invocation. Reports go to `out`, the effective
// configuration, warnings and diagnostics to `err`.
// Returns 0 on success, 1 on a runtime error, 2 on a usage error.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
// `args` excludes the program name.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace ssem::cli
