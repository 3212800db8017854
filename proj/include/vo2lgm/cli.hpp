#pragma once

#include <iosfwd>

namespace vo2lgm {

/// Entry point of the vo2lgm command line. Returns the process exit code;
/// errors are reported on `err` as "error: ...".
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace vo2lgm
