#include "lukv/profile.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lukv/util.hpp"

namespace lukv {

Safeguards Safeguards::defaults_for(MetricKind kind) {
  Safeguards sg;
  sg.recent_window = MetricSpec::defaults_for(kind).window_size;
  return sg;
}

void Safeguards::validate() const {
  if (sink_size < 0 || recent_window < 0)
    throw ConfigError("safeguard sizes must be nonnegative");
  if (!(max_compression > 0.0 && max_compression < 1.0))
    throw ConfigError("max_compression must be in (0,1)");
}

std::vector<double> default_ratio_grid() {
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99};
}

void Profile::validate() const {
  if (num_layers < 1 || num_heads < 1 || grid.empty())
    throw ValidationError("profile has empty dimensions");
  if (ratios.size() !=
      static_cast<std::size_t>(num_layers) * num_heads * grid.size())
    throw ValidationError("profile ratio tensor does not match its shape");
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (grid[g] < 0.0 || grid[g] > 1.0)
      throw ValidationError("profile grid ratio outside [0,1]");
    if (g > 0 && grid[g] <= grid[g - 1])
      throw ValidationError("profile grid is not strictly increasing");
  }
  const std::size_t G = grid.size();
  for (std::size_t head = 0; head < ratios.size() / G; ++head)
    for (std::size_t g = 0; g < G; ++g) {
      const double r = ratios[head * G + g];
      if (!(r >= 0.0 && r <= r_cap + 1e-12))
        throw ValidationError("profile ratio outside [0, r_cap]");
      if (g > 0 && r < ratios[head * G + g - 1] - 1e-12)
        throw ValidationError("profile ratios decrease along the grid");
    }
}

std::vector<double> solve_ratio_grid(const TraceBundle& trace,
                                     const MetricSpec& spec,
                                     std::span<const double> grid) {
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (grid[g] < 0.0 || grid[g] > 1.0)
      throw ConfigError("grid ratios must lie in [0,1]");
    if (g > 0 && grid[g] <= grid[g - 1])
      throw ConfigError("grid ratios must be strictly increasing");
  }

  const ModelShape& s = trace.shape;
  const int L = s.num_layers, H = s.num_heads, T = s.prefill_len;

  const ImportanceTensor importance = compute_oracle_importance(trace, true);
  const Ranking ranking = metric_ranking(metric_scores(trace, spec));
  const std::vector<LossCurve> curves = all_loss_curves(importance, ranking);

  std::vector<MarginalGains> gains;
  gains.reserve(curves.size());
  for (const LossCurve& c : curves)
    gains.push_back(marginal_gains(pava_convexify(c)));

  std::vector<double> out(s.head_count() * grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const long long total =
        budget_floor((1.0 - grid[g]) * static_cast<double>(s.head_count()) * T);
    const BudgetAllocation alloc = greedy_allocate(gains, L, H, total);
    for (std::size_t i = 0; i < s.head_count(); ++i)
      out[i * grid.size() + g] =
          1.0 - static_cast<double>(alloc.budgets[i]) / T;
  }
  return out;
}

Profile aggregate_profile(const std::vector<std::vector<double>>& per_query,
                          int num_layers, int num_heads,
                          std::span<const double> grid,
                          const std::string& metric, double r_cap,
                          const Safeguards& safeguards) {
  if (per_query.empty())
    throw ConfigError("aggregate_profile: need at least one query tensor");
  if (num_layers < 1 || num_heads < 1 || grid.empty())
    throw ConfigError("aggregate_profile: empty profile dimensions");
  const std::size_t cells =
      static_cast<std::size_t>(num_layers) * num_heads * grid.size();
  for (const auto& q : per_query)
    if (q.size() != cells)
      throw ConfigError("aggregate_profile: query tensor shape mismatch");

  Profile p;
  p.metric = metric;
  p.num_layers = num_layers;
  p.num_heads = num_heads;
  p.grid.assign(grid.begin(), grid.end());
  p.query_count = static_cast<int>(per_query.size());
  p.r_cap = r_cap;
  p.safeguards = safeguards;
  p.ratios.assign(cells, 0.0);

  for (std::size_t c = 0; c < cells; ++c) {
    double acc = 0.0;
    for (const auto& q : per_query) acc += q[c];
    p.ratios[c] = std::clamp(acc / per_query.size(), 0.0, r_cap);
  }

  // Averaged optima can wobble along the grid; project each head onto
  // non-decreasing sequences so lookups stay monotone.
  const std::size_t G = grid.size();
  for (std::size_t head = 0; head < cells / G; ++head) {
    std::span<double> row{p.ratios.data() + head * G, G};
    const auto fit = isotonic_fit({row.data(), G}, true);
    std::copy(fit.begin(), fit.end(), row.begin());
  }
  return p;
}

std::vector<double> lookup_ratios(const Profile& profile,
                                  double sigma_target) {
  if (profile.grid.empty() || profile.ratios.empty())
    throw ConfigError("empty profile");
  if (sigma_target < 0.0 || sigma_target > 1.0)
    throw ConfigError("sigma_target must lie in [0,1]");

  const std::size_t G = profile.grid.size();
  const std::size_t heads =
      static_cast<std::size_t>(profile.num_layers) * profile.num_heads;
  std::vector<double> out(heads, 0.0);

  if (sigma_target <= profile.grid.front()) {
    for (std::size_t i = 0; i < heads; ++i) out[i] = profile.ratios[i * G];
    return out;
  }
  if (sigma_target >= profile.grid.back()) {
    for (std::size_t i = 0; i < heads; ++i)
      out[i] = profile.ratios[i * G + (G - 1)];
    return out;
  }
  std::size_t k = 0;
  while (k + 2 < G && profile.grid[k + 1] <= sigma_target) ++k;
  const double g0 = profile.grid[k], g1 = profile.grid[k + 1];
  const double t = (sigma_target - g0) / (g1 - g0);
  for (std::size_t i = 0; i < heads; ++i) {
    const double r0 = profile.ratios[i * G + k];
    const double r1 = profile.ratios[i * G + k + 1];
    out[i] = r0 + t * (r1 - r0);
  }
  return out;
}

int safeguard_floor(int tokens, const Safeguards& safeguards) {
  const long long one_percent = budget_ceil(0.01 * tokens);
  return static_cast<int>(
      std::max<long long>(safeguards.sink_size + safeguards.recent_window,
                          one_percent));
}

std::vector<int> budget_from_ratios(std::span<const double> ratios, int tokens,
                                    const Safeguards& safeguards,
                                    bool exact_total) {
  safeguards.validate();
  if (tokens < safeguards.sink_size + safeguards.recent_window)
    throw ConfigError("token count smaller than sink + recent window");
  const int floor_min = safeguard_floor(tokens, safeguards);

  std::vector<long long> base(ratios.size(), 0);
  std::vector<double> exact(ratios.size(), 0.0);
  double exact_sum = 0.0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double r = ratios[i];
    if (r < 0.0 || r > 1.0)
      throw ConfigError("compression ratio outside [0,1]");
    const double capped = std::min(r, safeguards.max_compression);
    exact[i] = (1.0 - capped) * tokens;
    exact_sum += exact[i];
    base[i] = std::min<long long>(budget_floor(exact[i]), tokens);
  }

  if (exact_total) {
    long long remainder = budget_floor(exact_sum);
    for (long long b : base) remainder -= b;
    std::vector<std::size_t> order(ratios.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double fa = exact[a] - static_cast<double>(base[a]);
      const double fb = exact[b] - static_cast<double>(base[b]);
      if (fa != fb) return fa > fb;
      return a < b;
    });
    for (std::size_t t = 0; remainder > 0 && t < order.size(); ++t)
      if (base[order[t]] < tokens) {
        ++base[order[t]];
        --remainder;
      }
  }

  std::vector<int> budgets(ratios.size(), 0);
  for (std::size_t i = 0; i < ratios.size(); ++i)
    budgets[i] = static_cast<int>(std::min<long long>(
        std::max<long long>(base[i], floor_min), tokens));
  return budgets;
}

std::vector<std::vector<int>> apply_eviction(const Ranking& ranking,
                                             std::span<const int> budgets,
                                             const Safeguards& safeguards) {
  safeguards.validate();
  const std::size_t heads =
      static_cast<std::size_t>(ranking.num_layers) * ranking.num_heads;
  if (budgets.size() != heads)
    throw ValidationError("budget vector does not match ranking heads");
  const int T = ranking.positions;

  std::vector<std::vector<int>> retained(heads);
  std::vector<char> keep(T);
  for (std::size_t i = 0; i < heads; ++i) {
    const int b = budgets[i];
    if (b < 0 || b > T)
      throw ValidationError("budget out of range for head " +
                            std::to_string(i));
    std::fill(keep.begin(), keep.end(), 0);
    int count = 0;
    for (int j = 0; j < std::min(safeguards.sink_size, T) && count < b; ++j)
      if (!keep[j]) {
        keep[j] = 1;
        ++count;
      }
    for (int j = T - 1; j >= std::max(0, T - safeguards.recent_window) &&
                        count < b;
         --j)
      if (!keep[j]) {
        keep[j] = 1;
        ++count;
      }
    const HeadIndex hd{static_cast<int>(i) / ranking.num_heads,
                       static_cast<int>(i) % ranking.num_heads};
    for (int pos : ranking.head(hd)) {
      if (count >= b) break;
      if (!keep[pos]) {
        keep[pos] = 1;
        ++count;
      }
    }
    auto& set = retained[i];
    set.reserve(b);
    for (int j = 0; j < T; ++j)
      if (keep[j]) set.push_back(j);
  }
  return retained;
}

namespace {

/// profile.json is written by hand so every real carries exactly 17
/// significant digits and repeated saves are byte-identical.
void write_real_array(std::ostream& os, std::span<const double> values) {
  os << "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ", ";
    os << format_real(values[i]);
  }
  os << "]";
}

}  // namespace

void save_profile(const Profile& profile, const std::filesystem::path& path) {
  profile.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ValidationError("cannot open " + path.string() + " for write");

  out << "{\n";
  out << "  \"schema_version\": 1,\n";
  out << "  \"metric\": " << nlohmann::json(profile.metric).dump() << ",\n";
  out << "  \"L\": " << profile.num_layers << ",\n";
  out << "  \"H\": " << profile.num_heads << ",\n";
  out << "  \"grid\": ";
  write_real_array(out, profile.grid);
  out << ",\n";
  out << "  \"ratios\": [";
  const std::size_t G = profile.grid.size();
  for (int l = 0; l < profile.num_layers; ++l) {
    if (l) out << ", ";
    out << "[";
    for (int h = 0; h < profile.num_heads; ++h) {
      if (h) out << ", ";
      write_real_array(
          out, {profile.ratios.data() +
                    (static_cast<std::size_t>(l) * profile.num_heads + h) * G,
                G});
    }
    out << "]";
  }
  out << "],\n";
  out << "  \"M\": " << profile.query_count << ",\n";
  out << "  \"r_cap\": " << format_real(profile.r_cap) << ",\n";
  out << "  \"safeguards\": {\"sink\": " << profile.safeguards.sink_size
      << ", \"window\": " << profile.safeguards.recent_window
      << ", \"max_compression\": "
      << format_real(profile.safeguards.max_compression) << "}\n";
  out << "}\n";
  if (!out) throw ValidationError("short write to " + path.string());
}

Profile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing profile: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("malformed profile " + path.string() + ": " +
                          e.what());
  }

  Profile p;
  try {
    if (j.at("schema_version").get<int>() != 1)
      throw ValidationError("unsupported profile schema_version");
    p.metric = j.at("metric").get<std::string>();
    p.num_layers = j.at("L").get<int>();
    p.num_heads = j.at("H").get<int>();
    p.grid = j.at("grid").get<std::vector<double>>();
    p.query_count = j.at("M").get<int>();
    p.r_cap = j.at("r_cap").get<double>();
    const auto& sg = j.at("safeguards");
    p.safeguards.sink_size = sg.at("sink").get<int>();
    p.safeguards.recent_window = sg.at("window").get<int>();
    p.safeguards.max_compression = sg.at("max_compression").get<double>();

    const auto& rows = j.at("ratios");
    p.ratios.reserve(static_cast<std::size_t>(p.num_layers) * p.num_heads *
                     p.grid.size());
    if (static_cast<int>(rows.size()) != p.num_layers)
      throw ValidationError("profile ratios: layer count mismatch");
    for (const auto& layer : rows) {
      if (static_cast<int>(layer.size()) != p.num_heads)
        throw ValidationError("profile ratios: head count mismatch");
      for (const auto& head : layer) {
        const auto vals = head.get<std::vector<double>>();
        if (vals.size() != p.grid.size())
          throw ValidationError("profile ratios: grid length mismatch");
        p.ratios.insert(p.ratios.end(), vals.begin(), vals.end());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed profile " + path.string() + ": " +
                          e.what());
  }
  p.validate();
  return p;
}

}  // namespace lukv
