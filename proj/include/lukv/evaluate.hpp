#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lukv/profile.hpp"

namespace lukv {

/// Per-head and aggregated oracle eviction loss of one allocation.
struct EvalReport {
  int num_layers = 0;
  int num_heads = 0;
  std::vector<double> head_loss;   // [L][H]
  std::vector<double> layer_loss;  // [L]
  double total_loss = 0.0;
  std::vector<int> budgets;        // the evaluated budgets, [L][H]
};

/// Loss of retaining each head's metric-ranked prefix of its budget, using
/// intra-layer normalized oracle importance.
EvalReport evaluate_allocation(const TraceBundle& trace, const MetricSpec& spec,
                               const BudgetAllocation& allocation);

struct SolverComparisonRow {
  double sigma = 0.0;
  long long total_budget = 0;
  double greedy_relaxed = 0.0;  // greedy objective on convexified curves
  double dp_convex = 0.0;       // DP on convexified curves
  double dp_raw = 0.0;          // DP on raw curves
  double greedy_raw = 0.0;      // raw objective of the greedy allocation
};

/// Greedy-vs-DP table across compression ratios. Verifies greedy == DP on
/// the relaxed problem within 1e-9 for every row.
std::vector<SolverComparisonRow> compare_solvers(
    const TraceBundle& trace, const MetricSpec& spec,
    std::span<const double> sigmas);

struct PipelineConfig {
  ModelShape shape{2, 4, 128, 8, 16};
  std::uint64_t seed = 42;
  Scenario scenario = Scenario::misaligned;
  std::vector<MetricKind> metrics = {MetricKind::snapkv};
  double sigma_target = 0.8;
  std::vector<double> grid = default_ratio_grid();
  int calibration_queries = 30;  // M
  int eval_bundles = 1;
  std::vector<double> compare_sigmas = {0.5, 0.8, 0.9};
  double adaptive_alpha = 0.20;
  double pyramid_beta = 20.0;
  int sink_size = 4;
  double max_compression = 0.99;
  bool run_dp = true;  // skipped automatically when the instance is too large
  std::filesystem::path out_dir;
};

struct PipelineResult {
  int invariant_violations = 0;
  // metric -> allocator -> summed oracle eviction loss across eval bundles
  std::map<std::string, std::map<std::string, double>> total_loss;
  std::filesystem::path out_dir;
};

/// Offline profiling plus online lookup/budgeting/eviction, evaluated against
/// the baseline allocators. Writes profile, allocations and CSV reports into
/// config.out_dir; deterministic for a fixed config.
PipelineResult run_pipeline(const PipelineConfig& config);

}  // namespace lukv
