#pragma once

#include <span>
#include <string>
#include <vector>

#include "lukv/loss.hpp"
#include "lukv/metrics.hpp"

namespace lukv {

/// One block of a pool-adjacent-violators fit: indices [begin, end) share the
/// pooled mean value.
struct PavaBlock {
  int begin = 0;
  int end = 0;
  double mean = 0.0;
};

/// Least-squares monotone fit with equal weights. Blocks partition the input.
std::vector<PavaBlock> pava_blocks(std::span<const double> values,
                                   bool non_decreasing);

/// Fitted values expanded from pava_blocks.
std::vector<double> isotonic_fit(std::span<const double> values,
                                 bool non_decreasing);

/// Convex non-increasing surrogate of a loss curve: the greatest convex
/// minorant of its points. `contact[i]` marks where the surrogate touches
/// the input curve.
struct ConvexLossCurve {
  HeadIndex head;
  std::vector<double> values;  // size T+1
  std::vector<char> contact;   // size T+1

  int positions() const { return static_cast<int>(values.size()) - 1; }
};

/// Projects the curve's first differences onto non-increasing sequences
/// (PAVA) and reconstructs; equivalently the greatest convex minorant.
/// Block boundaries are snapped to the input values exactly.
ConvexLossCurve pava_convexify(const LossCurve& curve);

/// Per-budget decrease of the convex surrogate. base_loss and final_loss
/// carry the surrogate's endpoints so telescoped objectives can be formed
/// from the gains alone.
struct MarginalGains {
  HeadIndex head;
  double base_loss = 0.0;   // surrogate at budget 0
  double final_loss = 0.0;  // surrogate at budget T
  std::vector<double> gains;  // size T, non-increasing, nonnegative
};

MarginalGains marginal_gains(const ConvexLossCurve& surrogate);

enum class SolverKind { greedy, dp, brute, uniform, pyramid, adaptive_topk };

const char* to_string(SolverKind k);
SolverKind solver_from_string(const std::string& name);

/// Integer budgets per head summing to the global budget.
struct BudgetAllocation {
  int num_layers = 0;
  int num_heads = 0;
  std::vector<int> budgets;  // [L][H]
  long long total_budget = 0;
  double objective = 0.0;  // solver-native objective; see each allocator
  std::string solver;

  int at(int l, int h) const {
    return budgets[static_cast<std::size_t>(l) * num_heads + h];
  }
};

/// Exact optimum of the relaxed (convexified) objective: repeatedly grants
/// one unit of budget to the head with the largest next marginal gain. Ties
/// break toward the lexicographically first (layer, head, unit). Heads are
/// given in (layer, head) order; objective is the relaxed loss sum.
BudgetAllocation greedy_allocate(const std::vector<MarginalGains>& gains,
                                 int num_layers, int num_heads,
                                 long long total_budget);

/// Exact minimizer of the summed raw curves under the budget constraint,
/// head-by-head dynamic program over the budget axis. Argmin ties resolve
/// to the smallest budget for the later head.
BudgetAllocation mckp_dp_allocate(const std::vector<LossCurve>& curves,
                                  int num_layers, int num_heads,
                                  long long total_budget);
BudgetAllocation mckp_dp_allocate(const std::vector<ConvexLossCurve>& curves,
                                  int num_layers, int num_heads,
                                  long long total_budget);

/// Exhaustive reference solver; guarded to <= 5 heads and T <= 12.
BudgetAllocation brute_force_allocate(const std::vector<LossCurve>& curves,
                                      int num_layers, int num_heads,
                                      long long total_budget);

BudgetAllocation uniform_allocate(int num_layers, int num_heads, int positions,
                                  long long total_budget);

/// Linear per-layer ramp, steeper layers first; the first and last layer
/// weights differ by the factor beta. Uniform within a layer.
BudgetAllocation pyramid_allocate(int num_layers, int num_heads, int positions,
                                  long long total_budget, double beta = 20.0);

/// Layer-uniform budgets; within each layer every head keeps a safeguard
/// floor of alpha * (layer budget / H) and the remainder goes to the heads
/// owning the highest pooled metric scores.
BudgetAllocation adaptive_topk_allocate(const ScoreMatrix& scores,
                                        long long total_budget,
                                        double alpha = 0.20);

/// Raw loss sum of an allocation over the given curves (curve i belongs to
/// flat head i).
double allocation_objective(const std::vector<LossCurve>& curves,
                            const BudgetAllocation& alloc);
double allocation_objective(const std::vector<ConvexLossCurve>& curves,
                            const BudgetAllocation& alloc);

}  // namespace lukv
