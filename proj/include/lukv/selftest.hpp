#pragma once

#include <iosfwd>

namespace lukv::selftest {

/// Runs the full invariant suite single-threaded, printing one pass/fail
/// line per criterion. Returns the number of failed criteria.
int run_all(std::ostream& os);

}  // namespace lukv::selftest
