#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lukv/solver.hpp"

namespace lukv {

/// Eviction safety rails: always-retained sink prefix and recent suffix, and
/// a hard cap on per-head compression.
struct Safeguards {
  int sink_size = 4;
  int recent_window = 32;
  double max_compression = 0.99;

  static Safeguards defaults_for(MetricKind kind);
  void validate() const;  // throws ConfigError
};

/// Static lookup table mapping a global compression ratio to per-head local
/// ratios, aggregated over a calibration set of M query traces.
struct Profile {
  std::string metric;
  int num_layers = 0;
  int num_heads = 0;
  std::vector<double> grid;    // strictly increasing global ratios
  std::vector<double> ratios;  // [L][H][grid]
  int query_count = 0;         // M
  double r_cap = 0.99;
  Safeguards safeguards;

  double at(int l, int h, int g) const {
    return ratios[(static_cast<std::size_t>(l) * num_heads + h) * grid.size() +
                  g];
  }
  double& at(int l, int h, int g) {
    return ratios[(static_cast<std::size_t>(l) * num_heads + h) * grid.size() +
                  g];
  }

  /// Grid strictly increasing in [0,1]; ratios in [0, r_cap] and
  /// non-decreasing along the grid per head.
  void validate() const;  // throws ValidationError

  bool operator==(const Profile&) const = default;
};

inline bool operator==(const Safeguards& a, const Safeguards& b) {
  return a.sink_size == b.sink_size && a.recent_window == b.recent_window &&
         a.max_compression == b.max_compression;
}

std::vector<double> default_ratio_grid();  // 0.1..0.9 step 0.1, 0.95, 0.99

/// Per-query optimal local ratios: for every grid ratio, solves the relaxed
/// allocation (convexified oracle-loss curves under the metric ranking) at
/// B_total = floor((1-rho)*L*H*T) and records r = 1 - b/T per head.
/// Returns a [L][H][grid] tensor.
std::vector<double> solve_ratio_grid(const TraceBundle& trace,
                                     const MetricSpec& spec,
                                     std::span<const double> grid);

/// Elementwise mean over queries, clamped to [0, r_cap], then per-head
/// non-decreasing isotonic projection along the grid.
Profile aggregate_profile(const std::vector<std::vector<double>>& per_query,
                          int num_layers, int num_heads,
                          std::span<const double> grid,
                          const std::string& metric, double r_cap,
                          const Safeguards& safeguards);

/// Stored ratios at exact grid hits, linear interpolation between grid
/// points, clamped to the nearest endpoint outside the grid range.
std::vector<double> lookup_ratios(const Profile& profile, double sigma_target);

/// b = floor((1-r)*T) with r capped at max_compression, then raised to at
/// least sink + window and at least 1% of T. With `exact_total` the mass the
/// per-head floors discard is redistributed (before the safeguard raises) to
/// the heads with the largest fractional parts, so the sum matches
/// floor(sum_i (1-r_i)*T); off by default.
std::vector<int> budget_from_ratios(std::span<const double> ratios, int tokens,
                                    const Safeguards& safeguards,
                                    bool exact_total = false);

/// Minimum per-head budget the safeguards force at this many tokens.
int safeguard_floor(int tokens, const Safeguards& safeguards);

/// Retained positions per head: sink prefix, recent suffix, then top-ranked
/// positions until the budget is filled exactly. Sorted ascending.
std::vector<std::vector<int>> apply_eviction(const Ranking& ranking,
                                             std::span<const int> budgets,
                                             const Safeguards& safeguards);

/// profile.json with all reals at 17 significant digits; writing the same
/// profile twice is byte-identical.
void save_profile(const Profile& profile, const std::filesystem::path& path);
Profile load_profile(const std::filesystem::path& path);

}  // namespace lukv
