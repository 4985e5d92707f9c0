#pragma once

#include <span>
#include <utility>
#include <vector>

#include "lukv/oracle.hpp"

namespace lukv {

/// Cumulative eviction loss per budget: values[i] is the oracle-importance
/// mass lost when only the i best-ranked positions are retained.
/// values[0] is the head's total mass, values[T] is 0, and the sequence is
/// non-increasing with first difference equal to the importance of the
/// i-th ranked token.
struct LossCurve {
  HeadIndex head;
  std::vector<double> values;  // size T+1

  double total_mass() const { return values.front(); }
  int positions() const { return static_cast<int>(values.size()) - 1; }
};

/// Disjoint classification of a budget-b retention decision against the
/// oracle top-b set. Positions are 0-based and sorted ascending.
struct SetDecomposition {
  std::vector<int> hits;
  std::vector<int> misses;
  std::vector<int> false_positives;
  int budget = 0;
};

/// heuristic_loss = oracle_loss + optimality_gap; the gap is the importance
/// mass of misses minus that of false positives.
struct GapDecomposition {
  double heuristic_loss = 0.0;
  double oracle_loss = 0.0;
  double optimality_gap = 0.0;
};

/// Importance mass of all positions outside `retained`.
double eviction_loss(const ImportanceTensor& importance, HeadIndex head,
                     std::span<const int> retained);

LossCurve loss_curve(const ImportanceTensor& importance, HeadIndex head,
                     const Ranking& ranking);

/// Curves for every head, lexicographic (layer, head) order.
std::vector<LossCurve> all_loss_curves(const ImportanceTensor& importance,
                                       const Ranking& ranking);

std::pair<SetDecomposition, GapDecomposition> decompose(
    const ImportanceTensor& importance, HeadIndex head,
    const Ranking& oracle_rank, const Ranking& metric_rank, int budget);

/// recall(sigma) = retained importance mass at budget floor((1-sigma)*T)
/// over total mass. Zero-mass heads have recall 1 at every ratio.
std::vector<double> recall_curve(const ImportanceTensor& importance,
                                 HeadIndex head, const Ranking& ranking,
                                 std::span<const double> ratios);

/// Discrete second differences of the loss curve, one per interior index
/// i in 1..T-1; entries with negative value witness non-convexity. Returned
/// pairs are (i, value).
std::vector<std::pair<int, double>> second_difference_witness(
    const ImportanceTensor& importance, HeadIndex head, const Ranking& ranking);

}  // namespace lukv
