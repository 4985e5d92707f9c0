#pragma once

#include <filesystem>
#include <string>

#include "lukv/solver.hpp"

namespace lukv {

/// allocation.json: schema_version, metric, B_total, solver, budgets as an
/// [L][H] integer matrix, relaxed_objective, raw_objective.
void save_allocation(const BudgetAllocation& alloc, const std::string& metric,
                     double relaxed_objective, double raw_objective,
                     const std::filesystem::path& path);

struct LoadedAllocation {
  BudgetAllocation allocation;
  std::string metric;
  double relaxed_objective = 0.0;
  double raw_objective = 0.0;
};

LoadedAllocation load_allocation(const std::filesystem::path& path);

}  // namespace lukv
