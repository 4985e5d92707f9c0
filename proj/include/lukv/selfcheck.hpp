#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace lukv::selfcheck {

/// Deterministic generator for invariant checks, independent of the trace
/// generator's streams.
class CheckRng {
 public:
  explicit CheckRng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  int below(int n) {
    return std::min(n - 1, static_cast<int>(uniform() * n));
  }
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = 0; i + 1 < n; ++i) std::swap(p[i], p[i + below(n - i)]);
    return p;
  }

 private:
  std::mt19937_64 eng_;
};

/// Greatest convex minorant of the points (i, values[i]) evaluated back at
/// every integer i, built with an Andrew monotone-chain lower hull. This is
/// the reference construction the PAVA surrogate is checked against.
std::vector<double> lower_convex_hull(std::span<const double> values);

/// Kendall rank correlation between two orderings of the same index set.
double kendall_tau(std::span<const int> order_a, std::span<const int> order_b);

}  // namespace lukv::selfcheck
