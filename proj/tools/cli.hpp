#pragma once

#include <iosfwd>

namespace protoscope::cli {

/// Entry point shared by the executable and the CLI tests. Returns 0 on
/// success, 1 on a runtime/validation failure, 2 on a usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace protoscope::cli
