#pragma once

// Command-line front end: train, eval-linear, eval-knn, bench, plot, gen-data.

#include <iosfwd>

namespace whitebed {

/// Returns the process exit status: 0 on success, 1 on a module error (one
/// "error: ..." line on `err`), CLI11's codes on usage errors.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace whitebed
