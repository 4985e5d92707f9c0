#include <fstream>

#include <json.hpp>

#include "lukv/solver.hpp"
#include "lukv/allocation_io.hpp"

namespace lukv {

void save_allocation(const BudgetAllocation& alloc, const std::string& metric,
                     double relaxed_objective, double raw_objective,
                     const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["metric"] = metric;
  j["B_total"] = alloc.total_budget;
  j["solver"] = alloc.solver;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (int l = 0; l < alloc.num_layers; ++l) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int h = 0; h < alloc.num_heads; ++h) row.push_back(alloc.at(l, h));
    rows.push_back(row);
  }
  j["budgets"] = rows;
  j["relaxed_objective"] = relaxed_objective;
  j["raw_objective"] = raw_objective;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ValidationError("cannot open " + path.string() + " for write");
  out << j.dump(2) << "\n";
  if (!out) throw ValidationError("short write to " + path.string());
}

LoadedAllocation load_allocation(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing allocation file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("malformed allocation " + path.string() + ": " +
                          e.what());
  }

  LoadedAllocation out;
  try {
    if (j.at("schema_version").get<int>() != 1)
      throw ValidationError("unsupported allocation schema_version");
    out.metric = j.at("metric").get<std::string>();
    out.relaxed_objective = j.value("relaxed_objective", 0.0);
    out.raw_objective = j.value("raw_objective", 0.0);
    auto& a = out.allocation;
    a.total_budget = j.at("B_total").get<long long>();
    a.solver = j.at("solver").get<std::string>();
    const auto& rows = j.at("budgets");
    a.num_layers = static_cast<int>(rows.size());
    if (a.num_layers == 0)
      throw ValidationError("allocation has no budget rows");
    a.num_heads = static_cast<int>(rows.front().size());
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != a.num_heads)
        throw ValidationError("allocation rows have uneven lengths");
      for (const auto& v : row) a.budgets.push_back(v.get<int>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed allocation " + path.string() + ": " +
                          e.what());
  }
  return out;
}

}  // namespace lukv
