#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace lukv {

// Budgets are defined as floor((1-r)*T). The nudge keeps decimal ratios on
// the intended integer: e.g. (1-0.8)*1000 evaluates to 199.999... in binary
// and must still yield 200.
inline long long budget_floor(double x) {
  return static_cast<long long>(std::floor(x + 1e-9));
}

inline long long budget_ceil(double x) {
  return static_cast<long long>(std::ceil(x - 1e-9));
}

/// Shortest text form that survives a parse round trip (17 significant digits).
inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace lukv
