#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bq2::cli {

// Runs one command line. Returns 0 on success, 1 on runtime failure and 2 on
// usage or configuration errors. Progress goes to `out`, diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bq2::cli
