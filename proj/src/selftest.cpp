#include "lukv/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "lukv/evaluate.hpp"
#include "lukv/selfcheck.hpp"
#include "lukv/util.hpp"

namespace lukv::selftest {

namespace {

using Clock = std::chrono::steady_clock;
using selfcheck::CheckRng;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Reporter {
  std::ostream& os;
  int failures = 0;

  void report(int criterion, bool pass, const std::string& what) {
    os << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << criterion << ": "
       << what << "\n";
    if (!pass) ++failures;
  }
};

/// Random loss curve built from nonnegative per-step gains. Roughly half the
/// heads get descending gains (convex curve), the rest are shuffled.
LossCurve random_curve(CheckRng& rng, HeadIndex head, int positions,
                       double scale, bool force_convex = false) {
  std::vector<double> gains(positions);
  for (int i = 0; i < positions; ++i) {
    double g = std::exp(1.0 * rng.normal()) * scale;
    if (rng.uniform() < 0.05) g = 0.0;
    gains[i] = g;
  }
  if (force_convex || rng.uniform() < 0.5)
    std::sort(gains.begin(), gains.end(), std::greater<>());

  LossCurve curve;
  curve.head = head;
  curve.values.assign(positions + 1, 0.0);
  for (int i = positions - 1; i >= 0; --i)
    curve.values[i] = curve.values[i + 1] + gains[i];
  return curve;
}

bool curve_is_convex(const LossCurve& curve) {
  const int T = curve.positions();
  const double slack = 1e-12 * std::max(1.0, curve.values.front());
  for (int i = 1; i < T; ++i) {
    const double second = curve.values[i + 1] - 2.0 * curve.values[i] +
                          curve.values[i - 1];
    if (second < -slack) return false;
  }
  return true;
}

// --- criterion 1: greedy == MCKP-DP on the relaxed objective ---------------

bool criterion_greedy_matches_dp(Reporter& rep) {
  const auto start = Clock::now();
  CheckRng rng(20260801);
  const double fracs[5] = {0.1, 0.3, 0.5, 0.7, 0.9};
  double max_diff = 0.0;
  int checks = 0;

  for (int inst = 0; inst < 200; ++inst) {
    const int heads = 1 + static_cast<int>(rng.bits() % 64);
    const int T = 2 + static_cast<int>(rng.bits() % 255);
    const double scale = 1.0 / (static_cast<double>(heads) * T);

    std::vector<ConvexLossCurve> convex;
    std::vector<MarginalGains> gains;
    for (int h = 0; h < heads; ++h) {
      const LossCurve raw = random_curve(rng, {0, h}, T, scale);
      convex.push_back(pava_convexify(raw));
      gains.push_back(marginal_gains(convex.back()));
    }
    const long long capacity = static_cast<long long>(heads) * T;
    for (double frac : fracs) {
      const long long B = std::min<long long>(
          capacity, static_cast<long long>(std::llround(frac * capacity)));
      const BudgetAllocation g = greedy_allocate(gains, 1, heads, B);
      const BudgetAllocation d = mckp_dp_allocate(convex, 1, heads, B);
      max_diff = std::max(max_diff, std::abs(g.objective - d.objective));
      ++checks;
    }
  }
  const double elapsed = seconds_since(start);
  const bool pass = max_diff <= 1e-9 && elapsed <= 60.0;
  std::ostringstream what;
  what << "greedy equals MCKP-DP on the relaxed objective over 200 instances "
       << "(" << checks << " solves, max |diff| " << format_real(max_diff)
       << ", " << format_real(elapsed) << " s)";
  rep.report(1, pass, what.str());
  return pass;
}

// --- criterion 2: DP == brute force on tiny instances ----------------------

bool criterion_dp_matches_brute(Reporter& rep) {
  CheckRng rng(20260802);
  bool exact = true;
  double min_gap = 0.0, max_convex_gap = 0.0;

  for (int inst = 0; inst < 100; ++inst) {
    const int heads = 1 + static_cast<int>(rng.bits() % 4);
    const int T = 2 + static_cast<int>(rng.bits() % 9);
    std::vector<LossCurve> raw;
    std::vector<ConvexLossCurve> convex;
    std::vector<MarginalGains> gains;
    bool all_convex = true;
    for (int h = 0; h < heads; ++h) {
      raw.push_back(random_curve(rng, {0, h}, T, 0.1));
      all_convex = all_convex && curve_is_convex(raw.back());
      convex.push_back(pava_convexify(raw.back()));
      gains.push_back(marginal_gains(convex.back()));
    }
    for (long long B = 0; B <= static_cast<long long>(heads) * T; ++B) {
      const BudgetAllocation dp = mckp_dp_allocate(raw, 1, heads, B);
      const BudgetAllocation brute = brute_force_allocate(raw, 1, heads, B);
      if (dp.objective != brute.objective) exact = false;
      const BudgetAllocation g = greedy_allocate(gains, 1, heads, B);
      const double gap = allocation_objective(raw, g) - dp.objective;
      min_gap = std::min(min_gap, gap);
      if (all_convex) max_convex_gap = std::max(max_convex_gap, std::abs(gap));
    }
  }
  const bool pass = exact && min_gap >= -1e-9 && max_convex_gap <= 1e-9;
  std::ostringstream what;
  what << "MCKP-DP equals brute force exactly on 100 tiny instances; greedy "
       << "raw gap >= 0 (min " << format_real(min_gap)
       << ") and 0 on all-convex instances (max "
       << format_real(max_convex_gap) << ")";
  rep.report(2, pass, what.str());
  return pass;
}

// --- criterion 3: PAVA == greatest convex minorant --------------------------

bool criterion_pava_matches_hull(Reporter& rep) {
  CheckRng rng(20260803);
  double max_diff = 0.0;
  bool invariants = true;

  for (int inst = 0; inst < 500; ++inst) {
    const int T = 1 + static_cast<int>(rng.bits() % 64);
    const LossCurve raw = random_curve(rng, {0, 0}, T, 1.0);
    const ConvexLossCurve surrogate = pava_convexify(raw);
    const auto hull = selfcheck::lower_convex_hull(raw.values);

    const double scale = std::max(1.0, raw.values.front());
    for (int i = 0; i <= T; ++i) {
      max_diff = std::max(max_diff, std::abs(surrogate.values[i] - hull[i]));
      if (surrogate.values[i] > raw.values[i] + 1e-12 * scale)
        invariants = false;
      if (i > 0 &&
          surrogate.values[i] > surrogate.values[i - 1] + 1e-12 * scale)
        invariants = false;
      if (i >= 1 && i < T) {
        const double second = surrogate.values[i + 1] -
                              2.0 * surrogate.values[i] +
                              surrogate.values[i - 1];
        if (second < -1e-12 * scale) invariants = false;
      }
    }
    if (surrogate.values.front() != raw.values.front() ||
        surrogate.values.back() != raw.values.back())
      invariants = false;
  }

  LossCurve worked;
  worked.head = {0, 0};
  worked.values = {10.0, 6.0, 5.0, 1.0, 0.0};
  const ConvexLossCurve ws = pava_convexify(worked);
  const bool worked_ok =
      ws.values == std::vector<double>{10.0, 6.0, 3.5, 1.0, 0.0};

  const bool pass = max_diff <= 1e-9 && invariants && worked_ok;
  std::ostringstream what;
  what << "PAVA surrogate equals the lower-hull minorant on 500 curves (max "
       << "|diff| " << format_real(max_diff)
       << "), invariants hold, worked example reproduced "
       << (worked_ok ? "exactly" : "INCORRECTLY");
  rep.report(3, pass, what.str());
  return pass;
}

// --- criterion 4: loss decomposition identity -------------------------------

bool criterion_decomposition_identity(Reporter& rep) {
  CheckRng rng(20260804);
  double max_residual = 0.0, min_gap = 0.0;

  for (int inst = 0; inst < 1000; ++inst) {
    const int T = 1 + static_cast<int>(rng.bits() % 64);
    ImportanceTensor imp;
    imp.shape = ModelShape{1, 1, T, 1, 0};
    imp.values.resize(T);
    for (int j = 0; j < T; ++j)
      imp.values[j] = std::exp(1.2 * rng.normal());

    const Ranking orank = oracle_ranking(imp);
    Ranking metric;
    metric.num_layers = 1;
    metric.num_heads = 1;
    metric.positions = T;
    metric.order = rng.permutation(T);

    const int b = static_cast<int>(rng.bits() % (T + 1));
    const GapDecomposition gap =
        decompose(imp, {0, 0}, orank, metric, b).second;
    const double scale =
        std::max(1.0, std::abs(gap.heuristic_loss) +
                          std::abs(gap.oracle_loss) +
                          std::abs(gap.optimality_gap));
    max_residual = std::max(
        max_residual,
        std::abs(gap.heuristic_loss - gap.oracle_loss - gap.optimality_gap) /
            scale);
    min_gap = std::min(min_gap, gap.optimality_gap);
  }
  const bool pass = max_residual <= 1e-12 && min_gap >= 0.0;
  std::ostringstream what;
  what << "eviction-loss decomposition exact on 1000 triples (max relative "
       << "residual " << format_real(max_residual) << ", min gap "
       << format_real(min_gap) << ")";
  rep.report(4, pass, what.str());
  return pass;
}

// --- criterion 5: oracle recall dominance -----------------------------------

bool criterion_recall_dominance(Reporter& rep) {
  const std::vector<double> sigmas = default_ratio_grid();
  const ModelShape shape{2, 4, 96, 8, 16};
  long long violations = 0, comparisons = 0;

  for (int b = 0; b < 20; ++b) {
    const Scenario scenario = b < 10 ? Scenario::mixed : Scenario::misaligned;
    const TraceBundle bundle = generate_synthetic_trace(
        shape, static_cast<std::uint64_t>(b), scenario);
    const ImportanceTensor imp = compute_oracle_importance(bundle, true);
    const Ranking orank = oracle_ranking(imp);
    const Ranking ranks[2] = {
        metric_ranking(metric_scores(bundle, MetricSpec::snapkv_default())),
        metric_ranking(metric_scores(bundle, MetricSpec::keydiff_default()))};

    for (int l = 0; l < shape.num_layers; ++l)
      for (int h = 0; h < shape.num_heads; ++h) {
        const auto oracle_rec = recall_curve(imp, {l, h}, orank, sigmas);
        for (const Ranking& mr : ranks) {
          const auto rec = recall_curve(imp, {l, h}, mr, sigmas);
          for (std::size_t g = 0; g < sigmas.size(); ++g) {
            ++comparisons;
            if (oracle_rec[g] < rec[g]) ++violations;
          }
        }
      }
  }
  const bool pass = violations == 0;
  std::ostringstream what;
  what << "oracle recall dominates both metrics at every ratio (20 bundles, "
       << comparisons << " comparisons, " << violations << " violations)";
  rep.report(5, pass, what.str());
  return pass;
}

// --- criterion 6: second-difference witnesses --------------------------------

bool criterion_second_difference(Reporter& rep) {
  const ModelShape shape{2, 4, 96, 8, 16};
  double max_residual = 0.0;
  bool all_bundles_witnessed = true;

  for (int b = 0; b < 10; ++b) {
    const TraceBundle bundle = generate_synthetic_trace(
        shape, 100 + static_cast<std::uint64_t>(b), Scenario::misaligned);
    const ImportanceTensor imp = compute_oracle_importance(bundle, true);
    const Ranking mrank =
        metric_ranking(metric_scores(bundle, MetricSpec::snapkv_default()));

    std::size_t witnesses = 0;
    for (int l = 0; l < shape.num_layers; ++l)
      for (int h = 0; h < shape.num_heads; ++h) {
        const HeadIndex head{l, h};
        const LossCurve curve = loss_curve(imp, head, mrank);
        const auto order = mrank.head(head);
        const double scale = std::max(1.0, curve.values.front());
        for (int i = 1; i < shape.prefill_len; ++i) {
          const double from_curve = curve.values[i + 1] -
                                    2.0 * curve.values[i] +
                                    curve.values[i - 1];
          const double from_importance =
              imp.at(l, h, order[i - 1]) - imp.at(l, h, order[i]);
          max_residual = std::max(
              max_residual, std::abs(from_curve - from_importance) / scale);
        }
        witnesses += second_difference_witness(imp, head, mrank).size();
      }
    if (witnesses == 0) all_bundles_witnessed = false;
  }
  const bool pass = max_residual <= 1e-12 && all_bundles_witnessed;
  std::ostringstream what;
  what << "second differences match the importance formula (max relative "
       << "residual " << format_real(max_residual)
       << ") and every misaligned bundle has a negative witness";
  rep.report(6, pass, what.str());
  return pass;
}

// --- criterion 7: ordering vs uniform and adaptive ---------------------------

bool criterion_ordering(Reporter& rep) {
  const ModelShape shape{2, 4, 256, 8, 16};
  const MetricSpec spec = MetricSpec::snapkv_default();
  const Safeguards sg = Safeguards::defaults_for(MetricKind::snapkv);
  const double sigma = 0.8;
  const std::vector<double> grid = default_ratio_grid();
  const int L = shape.num_layers, H = shape.num_heads, T = shape.prefill_len;
  const long long B_total =
      budget_floor((1.0 - sigma) * static_cast<double>(shape.head_count()) * T);

  // Offline profile from a disjoint calibration set.
  std::vector<std::vector<double>> per_query;
  for (int q = 0; q < 10; ++q) {
    const TraceBundle calib = generate_synthetic_trace(
        shape, 900000 + static_cast<std::uint64_t>(q), Scenario::misaligned);
    per_query.push_back(solve_ratio_grid(calib, spec, grid));
  }
  const Profile profile =
      aggregate_profile(per_query, L, H, grid, "snapkv", 0.99, sg);

  const int floor_min = safeguard_floor(T, sg);
  auto floored = [&](std::vector<int> budgets) {
    for (int& b : budgets) b = std::clamp(b, std::min(floor_min, T), T);
    return budgets;
  };

  int wins = 0;
  for (int e = 0; e < 10; ++e) {
    const TraceBundle bundle = generate_synthetic_trace(
        shape, static_cast<std::uint64_t>(e), Scenario::misaligned);

    BudgetAllocation lukv;
    lukv.num_layers = L;
    lukv.num_heads = H;
    lukv.solver = "lukv";
    lukv.budgets =
        budget_from_ratios(lookup_ratios(profile, sigma), T, sg);
    for (int b : lukv.budgets) lukv.total_budget += b;

    BudgetAllocation uniform = uniform_allocate(L, H, T, B_total);
    uniform.budgets = floored(uniform.budgets);
    BudgetAllocation adaptive =
        adaptive_topk_allocate(metric_scores(bundle, spec), B_total, 0.20);
    adaptive.budgets = floored(adaptive.budgets);

    const double loss_lukv =
        evaluate_allocation(bundle, spec, lukv).total_loss;
    const double loss_uniform =
        evaluate_allocation(bundle, spec, uniform).total_loss;
    const double loss_adaptive =
        evaluate_allocation(bundle, spec, adaptive).total_loss;
    if (loss_lukv < loss_uniform && loss_lukv < loss_adaptive) ++wins;
  }
  const bool pass = wins == 10;
  std::ostringstream what;
  what << "profile-driven allocation beats uniform and adaptive top-k at "
       << "sigma 0.8 on " << wins << "/10 misaligned bundles";
  rep.report(7, pass, what.str());
  return pass;
}

// --- criterion 8: safeguards and serialization --------------------------------

bool files_identical(const std::filesystem::path& a,
                     const std::filesystem::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::ostringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return sa.str() == sb.str();
}

bool criterion_safeguards_and_formats(Reporter& rep, Clock::time_point start) {
  bool pass = true;
  std::ostringstream what;

  // Budget rule with the 0.99 cap.
  {
    const Safeguards sg = Safeguards::defaults_for(MetricKind::snapkv);
    const auto b1 = budget_from_ratios(std::vector<double>{0.8}, 1000, sg);
    if (b1[0] != 200) pass = false;
    const auto b2 = budget_from_ratios(std::vector<double>{1.0}, 100, sg);
    if (b2[0] != sg.sink_size + sg.recent_window) pass = false;
    const auto b3 = budget_from_ratios(std::vector<double>{0.0}, 100, sg);
    if (b3[0] != 100) pass = false;
  }

  // Sink positions stay in every retained set.
  {
    const ModelShape shape{2, 4, 96, 8, 16};
    const TraceBundle bundle =
        generate_synthetic_trace(shape, 8, Scenario::misaligned);
    const Safeguards sg = Safeguards::defaults_for(MetricKind::snapkv);
    const Ranking mrank = metric_ranking(
        metric_scores(bundle, MetricSpec::snapkv_default()));
    std::vector<double> ratios(shape.head_count(), 0.9);
    const auto budgets = budget_from_ratios(ratios, shape.prefill_len, sg);
    const auto retained = apply_eviction(mrank, budgets, sg);
    for (const auto& set : retained)
      for (int j = 0; j < sg.sink_size; ++j)
        if (!std::binary_search(set.begin(), set.end(), j)) pass = false;
  }

  // Byte-identical serialization round trips.
  const auto tmp = std::filesystem::temp_directory_path() /
                   "lukv_selftest_roundtrip";
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);
  {
    const ModelShape shape{2, 2, 48, 4, 8};
    const TraceBundle bundle =
        generate_synthetic_trace(shape, 42, Scenario::mixed);
    save_trace(bundle, tmp / "a");
    const TraceBundle again = load_trace(tmp / "a");
    if (!(again == bundle)) pass = false;
    save_trace(again, tmp / "b");
    for (const char* name :
         {"manifest.json", "decode_attn.f32", "vnorm.f32", "prefill_attn.f32",
          "keys.f32"})
      if (!files_identical(tmp / "a" / name, tmp / "b" / name)) pass = false;
  }
  {
    std::vector<std::vector<double>> per_query{{0.5, 0.6, 0.7, 0.8},
                                               {0.4, 0.5, 0.9, 0.95}};
    const Profile p = aggregate_profile(
        per_query, 2, 1, std::vector<double>{0.25, 0.75}, "snapkv", 0.99,
        Safeguards{});
    save_profile(p, tmp / "p1.json");
    const Profile q = load_profile(tmp / "p1.json");
    if (!(q == p)) pass = false;
    save_profile(q, tmp / "p2.json");
    if (!files_identical(tmp / "p1.json", tmp / "p2.json")) pass = false;
  }
  std::filesystem::remove_all(tmp);

  const double elapsed = seconds_since(start);
  if (elapsed > 300.0) pass = false;
  what << "safeguards hold and serialization round trips are byte-identical "
       << "(suite time " << format_real(elapsed) << " s of 300)";
  rep.report(8, pass, what.str());
  return pass;
}

}  // namespace

int run_all(std::ostream& os) {
  const auto start = Clock::now();
  Reporter rep{os};
  criterion_greedy_matches_dp(rep);
  criterion_dp_matches_brute(rep);
  criterion_pava_matches_hull(rep);
  criterion_decomposition_identity(rep);
  criterion_recall_dominance(rep);
  criterion_second_difference(rep);
  criterion_ordering(rep);
  criterion_safeguards_and_formats(rep, start);
  os << (rep.failures == 0 ? "selftest: all criteria passed\n"
                           : "selftest: FAILURES present\n");
  return rep.failures;
}

}  // namespace lukv::selftest
