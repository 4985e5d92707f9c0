#include "lukv/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>

#include "lukv/util.hpp"

namespace lukv {

std::vector<PavaBlock> pava_blocks(std::span<const double> values,
                                   bool non_decreasing) {
  std::vector<PavaBlock> blocks;
  blocks.reserve(values.size());
  // Pool while adjacent block means violate the requested order. Sums are
  // kept separately so pooled means stay exact averages.
  std::vector<double> sums;
  sums.reserve(values.size());
  for (int i = 0; i < static_cast<int>(values.size()); ++i) {
    blocks.push_back({i, i + 1, values[i]});
    sums.push_back(values[i]);
    while (blocks.size() > 1) {
      const PavaBlock& prev = blocks[blocks.size() - 2];
      const PavaBlock& cur = blocks.back();
      const bool violates =
          non_decreasing ? (cur.mean < prev.mean) : (cur.mean > prev.mean);
      if (!violates) break;
      const double sum = sums[sums.size() - 2] + sums.back();
      PavaBlock merged{prev.begin, cur.end, sum / (cur.end - prev.begin)};
      blocks.pop_back();
      sums.pop_back();
      blocks.back() = merged;
      sums.back() = sum;
    }
  }
  return blocks;
}

std::vector<double> isotonic_fit(std::span<const double> values,
                                 bool non_decreasing) {
  std::vector<double> out(values.size());
  for (const PavaBlock& b : pava_blocks(values, non_decreasing))
    for (int i = b.begin; i < b.end; ++i) out[i] = b.mean;
  return out;
}

ConvexLossCurve pava_convexify(const LossCurve& curve) {
  const int T = curve.positions();
  if (T < 0 || curve.values.empty())
    throw ValidationError("loss curve must have at least one point");
  for (int i = 0; i < T; ++i)
    if (curve.values[i + 1] > curve.values[i])
      throw ValidationError("invalid curve: increasing segment at index " +
                            std::to_string(i + 1));

  std::vector<double> gains(T);
  for (int i = 0; i < T; ++i) gains[i] = curve.values[i] - curve.values[i + 1];

  ConvexLossCurve out;
  out.head = curve.head;
  out.values.assign(T + 1, 0.0);
  out.contact.assign(T + 1, 0);
  out.values[0] = curve.values[0];
  out.contact[0] = 1;

  // Gain blocks correspond to chords of the greatest convex minorant; their
  // boundaries are contact points, so snap those to the input exactly and
  // interpolate linearly inside.
  for (const PavaBlock& b : pava_blocks(gains, false)) {
    const int s = b.begin;      // chord spans curve points s..e
    const int e = b.end;
    out.values[e] = curve.values[e];
    const double slope = (curve.values[e] - curve.values[s]) / (e - s);
    for (int i = s + 1; i < e; ++i)
      out.values[i] = curve.values[s] + (i - s) * slope;
  }
  for (int i = 0; i <= T; ++i)
    out.contact[i] = (out.values[i] == curve.values[i]) ? 1 : 0;
  return out;
}

MarginalGains marginal_gains(const ConvexLossCurve& surrogate) {
  const int T = surrogate.positions();
  MarginalGains g;
  g.head = surrogate.head;
  g.base_loss = surrogate.values.front();
  g.final_loss = surrogate.values.back();
  g.gains.resize(T);
  for (int i = 0; i < T; ++i)
    g.gains[i] = surrogate.values[i] - surrogate.values[i + 1];
  return g;
}

const char* to_string(SolverKind k) {
  switch (k) {
    case SolverKind::greedy:
      return "greedy";
    case SolverKind::dp:
      return "dp";
    case SolverKind::brute:
      return "brute";
    case SolverKind::uniform:
      return "uniform";
    case SolverKind::pyramid:
      return "pyramid";
    case SolverKind::adaptive_topk:
      return "adaptive";
  }
  return "?";
}

SolverKind solver_from_string(const std::string& name) {
  if (name == "greedy") return SolverKind::greedy;
  if (name == "dp") return SolverKind::dp;
  if (name == "brute") return SolverKind::brute;
  if (name == "uniform") return SolverKind::uniform;
  if (name == "pyramid") return SolverKind::pyramid;
  if (name == "adaptive" || name == "adaptive_topk")
    return SolverKind::adaptive_topk;
  throw ConfigError("unknown solver: " + name);
}

namespace {

void check_head_grid(std::size_t entries, int L, int H) {
  if (L < 1 || H < 1 || entries != static_cast<std::size_t>(L) * H)
    throw ConfigError("head list does not match the L x H grid");
}

void check_budget(long long total_budget, long long capacity) {
  if (total_budget < 0)
    throw InfeasibleError("total budget must be nonnegative");
  if (total_budget > capacity)
    throw InfeasibleError("total budget " + std::to_string(total_budget) +
                          " exceeds capacity " + std::to_string(capacity));
}

}  // namespace

BudgetAllocation greedy_allocate(const std::vector<MarginalGains>& gains,
                                 int num_layers, int num_heads,
                                 long long total_budget) {
  check_head_grid(gains.size(), num_layers, num_heads);
  const std::size_t n = gains.size();
  long long capacity = 0;
  for (const auto& g : gains) capacity += static_cast<long long>(g.gains.size());
  check_budget(total_budget, capacity);

  struct Entry {
    double gain;
    std::uint32_t head;  // flat index; doubles as the tie-break key
  };
  struct Less {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.gain != b.gain) return a.gain < b.gain;
      return a.head > b.head;  // prefer lower (layer, head) on equal gain
    }
  };
  std::priority_queue<Entry, std::vector<Entry>, Less> queue;

  std::vector<int> budgets(n, 0);
  for (std::uint32_t i = 0; i < n; ++i)
    if (!gains[i].gains.empty())
      queue.push({gains[i].gains[0], i});

  for (long long step = 0; step < total_budget; ++step) {
    Entry top = queue.top();
    queue.pop();
    const int b = ++budgets[top.head];
    const auto& g = gains[top.head].gains;
    if (b < static_cast<int>(g.size())) queue.push({g[b], top.head});
  }

  BudgetAllocation alloc;
  alloc.num_layers = num_layers;
  alloc.num_heads = num_heads;
  alloc.budgets = std::move(budgets);
  alloc.total_budget = total_budget;
  alloc.solver = "greedy";
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double loss = gains[i].base_loss;
    for (int t = 0; t < alloc.budgets[i]; ++t) loss -= gains[i].gains[t];
    objective += loss;
  }
  alloc.objective = objective;
  return alloc;
}

namespace {

/// Shared MCKP dynamic program over per-head curve values (curve[x] = loss at
/// budget x, x in 0..T). Smallest budget per head wins objective ties.
BudgetAllocation dp_solve(const std::vector<const double*>& curves, int T,
                          int num_layers, int num_heads,
                          long long total_budget, const char* tag) {
  const std::size_t n = curves.size();
  check_head_grid(n, num_layers, num_heads);
  check_budget(total_budget, static_cast<long long>(n) * T);

  const int B = static_cast<int>(total_budget);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  std::vector<double> prev(B + 1, kInf), cur(B + 1, kInf);
  prev[0] = 0.0;
  std::vector<std::uint16_t> choice(n * (B + 1), 0);

  for (std::size_t i = 0; i < n; ++i) {
    std::fill(cur.begin(), cur.end(), kInf);
    std::uint16_t* pick = choice.data() + i * (B + 1);
    const int x_max = std::min(T, B);
    for (int x = 0; x <= x_max; ++x) {
      const double lx = curves[i][x];
      const double* src = prev.data();
      double* dst = cur.data() + x;
      for (int b = x; b <= B; ++b, ++src, ++dst) {
        const double v = *src + lx;
        if (v < *dst) {
          *dst = v;
          pick[b] = static_cast<std::uint16_t>(x);
        }
      }
    }
    std::swap(prev, cur);
  }

  if (!(prev[B] < kInf))
    throw InfeasibleError("no allocation meets the budget exactly");

  BudgetAllocation alloc;
  alloc.num_layers = num_layers;
  alloc.num_heads = num_heads;
  alloc.budgets.assign(n, 0);
  alloc.total_budget = total_budget;
  alloc.objective = prev[B];
  alloc.solver = tag;
  int b = B;
  for (std::size_t i = n; i-- > 0;) {
    const int x = choice[i * (B + 1) + b];
    alloc.budgets[i] = x;
    b -= x;
  }
  return alloc;
}

template <typename Curve>
std::vector<const double*> curve_pointers(const std::vector<Curve>& curves,
                                          int& T) {
  if (curves.empty()) throw ConfigError("no curves given");
  T = curves.front().positions();
  std::vector<const double*> ptrs;
  ptrs.reserve(curves.size());
  for (const auto& c : curves) {
    if (c.positions() != T)
      throw ConfigError("curves must share the same length");
    ptrs.push_back(c.values.data());
  }
  return ptrs;
}

}  // namespace

BudgetAllocation mckp_dp_allocate(const std::vector<LossCurve>& curves,
                                  int num_layers, int num_heads,
                                  long long total_budget) {
  int T = 0;
  const auto ptrs = curve_pointers(curves, T);
  return dp_solve(ptrs, T, num_layers, num_heads, total_budget, "dp");
}

BudgetAllocation mckp_dp_allocate(const std::vector<ConvexLossCurve>& curves,
                                  int num_layers, int num_heads,
                                  long long total_budget) {
  int T = 0;
  const auto ptrs = curve_pointers(curves, T);
  return dp_solve(ptrs, T, num_layers, num_heads, total_budget, "dp");
}

BudgetAllocation brute_force_allocate(const std::vector<LossCurve>& curves,
                                      int num_layers, int num_heads,
                                      long long total_budget) {
  int T = 0;
  const auto ptrs = curve_pointers(curves, T);
  const std::size_t n = ptrs.size();
  check_head_grid(n, num_layers, num_heads);
  if (n > 5 || T > 12)
    throw ConfigError("brute force guardrail: at most 5 heads and T <= 12");
  check_budget(total_budget, static_cast<long long>(n) * T);

  std::vector<int> budgets(n, 0), best_budgets;
  double best = std::numeric_limits<double>::infinity();

  // Enumerate in lexicographic budget order; left-fold the losses in head
  // order so objectives compare bit-for-bit with the DP accumulation.
  auto recurse = [&](auto&& self, std::size_t i, long long remaining,
                     double acc) -> void {
    if (i == n) {
      if (remaining == 0 && acc < best) {
        best = acc;
        best_budgets = budgets;
      }
      return;
    }
    const long long tail_capacity = static_cast<long long>(n - 1 - i) * T;
    for (int x = 0; x <= T; ++x) {
      if (x > remaining) break;
      if (remaining - x > tail_capacity) continue;
      budgets[i] = x;
      self(self, i + 1, remaining - x, acc + ptrs[i][x]);
    }
    budgets[i] = 0;
  };
  recurse(recurse, 0, total_budget, 0.0);

  BudgetAllocation alloc;
  alloc.num_layers = num_layers;
  alloc.num_heads = num_heads;
  alloc.budgets = std::move(best_budgets);
  alloc.total_budget = total_budget;
  alloc.objective = best;
  alloc.solver = "brute";
  return alloc;
}

namespace {

/// Splits `total` into `bins` integer parts, largest shares first according to
/// `weights`, remainders by largest fractional part (ties to lower index).
std::vector<long long> proportional_split(long long total,
                                          const std::vector<double>& weights,
                                          long long cap_per_bin) {
  const std::size_t n = weights.size();
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::vector<long long> out(n, 0);
  std::vector<std::pair<double, std::size_t>> fracs(n);
  long long assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = total * (weights[i] / wsum);
    out[i] = static_cast<long long>(std::floor(share));
    fracs[i] = {share - out[i], i};
    assigned += out[i];
  }
  std::sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t t = 0; assigned < total; ++t) {
    out[fracs[t % n].second] += 1;
    ++assigned;
  }
  // Respect per-bin capacity by spilling the excess to later bins.
  long long carry = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] += carry;
    carry = 0;
    if (out[i] > cap_per_bin) {
      carry = out[i] - cap_per_bin;
      out[i] = cap_per_bin;
    }
  }
  for (std::size_t i = n; carry > 0 && i-- > 0;) {
    const long long room = cap_per_bin - out[i];
    const long long take = std::min(room, carry);
    out[i] += take;
    carry -= take;
  }
  return out;
}

std::vector<long long> even_split(long long total, std::size_t bins) {
  std::vector<long long> out(bins, total / static_cast<long long>(bins));
  const long long rem = total % static_cast<long long>(bins);
  for (long long i = 0; i < rem; ++i) out[static_cast<std::size_t>(i)] += 1;
  return out;
}

}  // namespace

BudgetAllocation uniform_allocate(int num_layers, int num_heads, int positions,
                                  long long total_budget) {
  if (num_layers < 1 || num_heads < 1 || positions < 1)
    throw ConfigError("uniform_allocate: empty grid");
  const long long n = static_cast<long long>(num_layers) * num_heads;
  check_budget(total_budget, n * positions);

  const auto split = even_split(total_budget, static_cast<std::size_t>(n));
  BudgetAllocation alloc;
  alloc.num_layers = num_layers;
  alloc.num_heads = num_heads;
  alloc.budgets.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < alloc.budgets.size(); ++i)
    alloc.budgets[i] = static_cast<int>(split[i]);
  alloc.total_budget = total_budget;
  alloc.objective = std::numeric_limits<double>::quiet_NaN();
  alloc.solver = "uniform";
  return alloc;
}

BudgetAllocation pyramid_allocate(int num_layers, int num_heads, int positions,
                                  long long total_budget, double beta) {
  if (num_layers < 1 || num_heads < 1 || positions < 1)
    throw ConfigError("pyramid_allocate: empty grid");
  if (beta < 1.0) throw ConfigError("pyramid beta must be >= 1");
  const long long n = static_cast<long long>(num_layers) * num_heads;
  check_budget(total_budget, n * positions);

  // Linear ramp from beta (first layer) down to 1 (last layer).
  std::vector<double> weights(num_layers, 1.0);
  if (num_layers > 1) {
    const double slope = (beta - 1.0) / (num_layers - 1);
    for (int l = 0; l < num_layers; ++l)
      weights[l] = 1.0 + slope * (num_layers - 1 - l);
  }
  const long long layer_cap = static_cast<long long>(num_heads) * positions;
  const auto layer_budgets =
      proportional_split(total_budget, weights, layer_cap);

  BudgetAllocation alloc;
  alloc.num_layers = num_layers;
  alloc.num_heads = num_heads;
  alloc.budgets.assign(static_cast<std::size_t>(n), 0);
  for (int l = 0; l < num_layers; ++l) {
    const auto heads = even_split(layer_budgets[static_cast<std::size_t>(l)],
                                  static_cast<std::size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h)
      alloc.budgets[static_cast<std::size_t>(l) * num_heads + h] =
          static_cast<int>(heads[static_cast<std::size_t>(h)]);
  }
  alloc.total_budget = total_budget;
  alloc.objective = std::numeric_limits<double>::quiet_NaN();
  alloc.solver = "pyramid";
  return alloc;
}

BudgetAllocation adaptive_topk_allocate(const ScoreMatrix& scores,
                                        long long total_budget, double alpha) {
  const int L = scores.num_layers, H = scores.num_heads, T = scores.positions;
  if (L < 1 || H < 1 || T < 1)
    throw ConfigError("adaptive_topk_allocate: empty score matrix");
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("adaptive alpha must be in [0,1]");
  check_budget(total_budget, static_cast<long long>(L) * H * T);

  const Ranking ranks = metric_ranking(scores);
  const long long layer_cap = static_cast<long long>(H) * T;
  // Cross-layer sorting is impractical at prefill time, so budgets are
  // layer-uniform and heads compete only within their layer.
  auto layer_budgets = even_split(total_budget, static_cast<std::size_t>(L));
  {
    long long carry = 0;
    for (int l = 0; l < L; ++l) {
      layer_budgets[l] += carry;
      carry = 0;
      if (layer_budgets[l] > layer_cap) {
        carry = layer_budgets[l] - layer_cap;
        layer_budgets[l] = layer_cap;
      }
    }
    for (int l = L; carry > 0 && l-- > 0;) {
      const long long take = std::min(layer_cap - layer_budgets[l], carry);
      layer_budgets[l] += take;
      carry -= take;
    }
  }

  BudgetAllocation alloc;
  alloc.num_layers = L;
  alloc.num_heads = H;
  alloc.budgets.assign(static_cast<std::size_t>(L) * H, 0);
  alloc.total_budget = total_budget;
  alloc.objective = std::numeric_limits<double>::quiet_NaN();
  alloc.solver = "adaptive";

  struct Candidate {
    double score;
    int head;
    int position;
  };
  std::vector<Candidate> pool;
  for (int l = 0; l < L; ++l) {
    const long long lb = layer_budgets[static_cast<std::size_t>(l)];
    const int floor_each = static_cast<int>(
        std::min<long long>(T, budget_floor(alpha * static_cast<double>(lb) /
                                            H)));
    long long remaining = lb - static_cast<long long>(floor_each) * H;

    pool.clear();
    for (int h = 0; h < H; ++h) {
      alloc.budgets[static_cast<std::size_t>(l) * H + h] = floor_each;
      const auto order = ranks.head({l, h});
      for (int i = floor_each; i < T; ++i)
        pool.push_back({scores.at(l, h, order[i]), h, order[i]});
    }
    std::sort(pool.begin(), pool.end(), [](const Candidate& a,
                                           const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.head != b.head) return a.head < b.head;
      return a.position < b.position;
    });
    for (const Candidate& c : pool) {
      if (remaining == 0) break;
      int& b = alloc.budgets[static_cast<std::size_t>(l) * H + c.head];
      if (b < T) {
        ++b;
        --remaining;
      }
    }
  }
  return alloc;
}

double allocation_objective(const std::vector<LossCurve>& curves,
                            const BudgetAllocation& alloc) {
  double total = 0.0;
  for (std::size_t i = 0; i < curves.size(); ++i)
    total += curves[i].values[static_cast<std::size_t>(alloc.budgets[i])];
  return total;
}

double allocation_objective(const std::vector<ConvexLossCurve>& curves,
                            const BudgetAllocation& alloc) {
  double total = 0.0;
  for (std::size_t i = 0; i < curves.size(); ++i)
    total += curves[i].values[static_cast<std::size_t>(alloc.budgets[i])];
  return total;
}

}  // namespace lukv
