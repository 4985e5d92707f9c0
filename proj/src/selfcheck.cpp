#include "lukv/selfcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace lukv::selfcheck {

std::vector<double> lower_convex_hull(std::span<const double> values) {
  const int n = static_cast<int>(values.size());
  if (n == 0) return {};
  if (n == 1) return {values[0]};

  // Monotone chain over points (i, values[i]), x already sorted.
  std::vector<int> hull;
  auto cross = [&](int a, int b, int c) {
    return static_cast<double>(b - a) * (values[c] - values[a]) -
           (values[b] - values[a]) * static_cast<double>(c - a);
  };
  for (int i = 0; i < n; ++i) {
    while (hull.size() >= 2 &&
           cross(hull[hull.size() - 2], hull.back(), i) <= 0.0)
      hull.pop_back();
    hull.push_back(i);
  }

  std::vector<double> out(n, 0.0);
  for (std::size_t s = 0; s + 1 < hull.size(); ++s) {
    const int x0 = hull[s], x1 = hull[s + 1];
    out[x0] = values[x0];
    const double slope = (values[x1] - values[x0]) / (x1 - x0);
    for (int i = x0 + 1; i < x1; ++i)
      out[i] = values[x0] + (i - x0) * slope;
  }
  out[hull.back()] = values[hull.back()];
  return out;
}

double kendall_tau(std::span<const int> order_a, std::span<const int> order_b) {
  const int n = static_cast<int>(order_a.size());
  if (order_b.size() != order_a.size())
    throw std::invalid_argument("kendall_tau: length mismatch");
  if (n < 2) return 1.0;

  std::vector<int> rank_a(n), rank_b(n);
  for (int i = 0; i < n; ++i) {
    rank_a[order_a[i]] = i;
    rank_b[order_b[i]] = i;
  }
  long long concordant = 0, discordant = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const int da = rank_a[i] - rank_a[j];
      const int db = rank_b[i] - rank_b[j];
      const long long sign =
          static_cast<long long>(da) * static_cast<long long>(db);
      if (sign > 0)
        ++concordant;
      else if (sign < 0)
        ++discordant;
    }
  const double pairs = 0.5 * n * (n - 1);
  return (concordant - discordant) / pairs;
}

}  // namespace lukv::selfcheck
