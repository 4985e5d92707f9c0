#include "lukv/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lukv/allocation_io.hpp"
#include "lukv/util.hpp"

namespace lukv {

EvalReport evaluate_allocation(const TraceBundle& trace, const MetricSpec& spec,
                               const BudgetAllocation& allocation) {
  const ModelShape& s = trace.shape;
  if (allocation.num_layers != s.num_layers ||
      allocation.num_heads != s.num_heads)
    throw ValidationError("allocation shape does not match trace");
  const int T = s.prefill_len;
  for (int b : allocation.budgets)
    if (b < 0 || b > T)
      throw ValidationError("allocation budget out of range 0..T");

  const ImportanceTensor importance = compute_oracle_importance(trace, true);
  const Ranking ranking = metric_ranking(metric_scores(trace, spec));

  EvalReport report;
  report.num_layers = s.num_layers;
  report.num_heads = s.num_heads;
  report.head_loss.assign(s.head_count(), 0.0);
  report.layer_loss.assign(s.num_layers, 0.0);
  report.budgets = allocation.budgets;

  for (int l = 0; l < s.num_layers; ++l) {
    double layer = 0.0;
    for (int h = 0; h < s.num_heads; ++h) {
      const auto order = ranking.head({l, h});
      const int b = allocation.at(l, h);
      double loss = 0.0;
      for (int i = b; i < T; ++i) loss += importance.at(l, h, order[i]);
      report.head_loss[static_cast<std::size_t>(l) * s.num_heads + h] = loss;
      layer += loss;
    }
    report.layer_loss[l] = layer;
    report.total_loss += layer;
  }
  return report;
}

std::vector<SolverComparisonRow> compare_solvers(
    const TraceBundle& trace, const MetricSpec& spec,
    std::span<const double> sigmas) {
  const ModelShape& s = trace.shape;
  const int T = s.prefill_len;
  const long long heads = static_cast<long long>(s.head_count());

  const ImportanceTensor importance = compute_oracle_importance(trace, true);
  const Ranking ranking = metric_ranking(metric_scores(trace, spec));
  const std::vector<LossCurve> raw = all_loss_curves(importance, ranking);
  std::vector<ConvexLossCurve> convex;
  std::vector<MarginalGains> gains;
  convex.reserve(raw.size());
  gains.reserve(raw.size());
  for (const LossCurve& c : raw) {
    convex.push_back(pava_convexify(c));
    gains.push_back(marginal_gains(convex.back()));
  }

  // DP work grows with heads * B * T; refuse clearly oversized instances.
  for (double sigma : sigmas) {
    const long long b = budget_floor((1.0 - sigma) * heads * T);
    if (heads * (b + 1) * (std::min<long long>(T, b) + 1) > 4'000'000'000LL)
      throw ConfigError("instance too large for the DP comparison");
  }

  std::vector<SolverComparisonRow> rows;
  for (double sigma : sigmas) {
    if (sigma < 0.0 || sigma > 1.0)
      throw ConfigError("sigma must lie in [0,1]");
    SolverComparisonRow row;
    row.sigma = sigma;
    row.total_budget = budget_floor((1.0 - sigma) * heads * T);

    const BudgetAllocation g =
        greedy_allocate(gains, s.num_layers, s.num_heads, row.total_budget);
    const BudgetAllocation dc = mckp_dp_allocate(convex, s.num_layers,
                                                 s.num_heads, row.total_budget);
    const BudgetAllocation dr =
        mckp_dp_allocate(raw, s.num_layers, s.num_heads, row.total_budget);
    row.greedy_relaxed = g.objective;
    row.dp_convex = dc.objective;
    row.dp_raw = dr.objective;
    row.greedy_raw = allocation_objective(raw, g);
    if (std::abs(row.greedy_relaxed - row.dp_convex) > 1e-9)
      throw ValidationError(
          "greedy did not match DP on the relaxed objective: " +
          format_real(row.greedy_relaxed) + " vs " +
          format_real(row.dp_convex));
    rows.push_back(row);
  }
  return rows;
}

namespace {

class CsvFile {
 public:
  CsvFile(const std::filesystem::path& path, const std::string& header) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_)
      throw ValidationError("cannot open " + path.string() + " for write");
    out_ << header << "\n";
  }
  template <typename... Parts>
  void row(const Parts&... parts) {
    bool first = true;
    ((out_ << (first ? "" : ","), first = false, write(parts)), ...);
    out_ << "\n";
  }

 private:
  void write(double v) { out_ << format_real(v); }
  void write(int v) { out_ << v; }
  void write(long long v) { out_ << v; }
  void write(std::uint64_t v) { out_ << v; }
  void write(const std::string& v) { out_ << v; }
  void write(const char* v) { out_ << v; }
  std::ofstream out_;
};

std::uint64_t calibration_seed(std::uint64_t base, int query) {
  return base + 100000ULL + static_cast<std::uint64_t>(query);
}

std::vector<int> floored_budgets(const std::vector<int>& budgets, int tokens,
                                 const Safeguards& sg) {
  const int floor_min = std::min(tokens, safeguard_floor(tokens, sg));
  std::vector<int> out(budgets.size());
  for (std::size_t i = 0; i < budgets.size(); ++i)
    out[i] = std::clamp(budgets[i], floor_min, tokens);
  return out;
}

struct AllocatorRun {
  std::string name;
  BudgetAllocation allocation;  // budgets after safeguard flooring
  long long nominal_total = 0;
  EvalReport report;
};

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.shape.validate();
  if (config.metrics.empty())
    throw ConfigError("pipeline needs at least one metric");
  if (config.sigma_target < 0.0 || config.sigma_target > 1.0)
    throw ConfigError("sigma_target must lie in [0,1]");
  if (config.calibration_queries < 1)
    throw ConfigError("calibration_queries must be >= 1");
  if (config.eval_bundles < 1) throw ConfigError("eval_bundles must be >= 1");
  if (config.out_dir.empty()) throw ConfigError("out_dir must be set");
  std::filesystem::create_directories(config.out_dir);

  const ModelShape& shape = config.shape;
  const int L = shape.num_layers, H = shape.num_heads, T = shape.prefill_len;
  const long long heads = static_cast<long long>(shape.head_count());

  PipelineResult result;
  result.out_dir = config.out_dir;
  int violations = 0;

  CsvFile summary(config.out_dir / "summary.csv",
                  "metric,bundle_seed,allocator,B_total,evaluated_budget_"
                  "total,total_oracle_eviction_loss");
  CsvFile layer_csv(config.out_dir / "allocator_layer_loss.csv",
                    "metric,allocator,layer,loss");
  CsvFile head_csv(config.out_dir / "allocator_head_loss.csv",
                   "metric,allocator,layer,head,budget,loss");
  CsvFile recall_csv(config.out_dir / "recall.csv",
                     "layer,head,metric,sigma,recall");
  CsvFile recall_agg_csv(config.out_dir / "recall_aggregate.csv",
                         "metric,sigma,mean_recall,mass_weighted_recall");
  CsvFile compare_csv(config.out_dir / "compare.csv",
                      "metric,sigma,B_total,greedy_relaxed,dp_convex,dp_raw,"
                      "greedy_raw");

  const std::vector<double> recall_grid = default_ratio_grid();
  bool recall_written = false;

  for (std::size_t mi = 0; mi < config.metrics.size(); ++mi) {
    const MetricKind kind = config.metrics[mi];
    const std::string metric_name = to_string(kind);
    const MetricSpec spec = MetricSpec::defaults_for(kind);
    Safeguards sg = Safeguards::defaults_for(kind);
    sg.sink_size = config.sink_size;
    sg.max_compression = config.max_compression;
    if (T < sg.sink_size + sg.recent_window)
      throw ConfigError("prefill length too small for the safeguards of " +
                        metric_name);

    // Offline phase: solve the ratio grid per calibration query, average.
    std::vector<std::vector<double>> per_query;
    per_query.reserve(config.calibration_queries);
    for (int q = 0; q < config.calibration_queries; ++q) {
      const TraceBundle calib = generate_synthetic_trace(
          shape, calibration_seed(config.seed, q), config.scenario);
      per_query.push_back(solve_ratio_grid(calib, spec, config.grid));
    }
    const Profile profile =
        aggregate_profile(per_query, L, H, config.grid, metric_name,
                          sg.max_compression, sg);
    save_profile(profile, config.out_dir / ("profile_" + metric_name + ".json"));

    const long long B_total =
        budget_floor((1.0 - config.sigma_target) * heads * T);
    const bool dp_ok =
        config.run_dp &&
        heads * (B_total + 1) * (std::min<long long>(T, B_total) + 1) <=
            4'000'000'000LL;

    for (int e = 0; e < config.eval_bundles; ++e) {
      const std::uint64_t bundle_seed = config.seed + e;
      const TraceBundle bundle =
          generate_synthetic_trace(shape, bundle_seed, config.scenario);

      const ImportanceTensor importance =
          compute_oracle_importance(bundle, true);
      const Ranking mrank = metric_ranking(metric_scores(bundle, spec));
      const std::vector<LossCurve> raw = all_loss_curves(importance, mrank);
      std::vector<ConvexLossCurve> convex;
      std::vector<MarginalGains> gains;
      for (const LossCurve& c : raw) {
        convex.push_back(pava_convexify(c));
        gains.push_back(marginal_gains(convex.back()));
      }

      std::vector<AllocatorRun> runs;

      {  // profile-based LU-KV: lookup -> budgeting
        AllocatorRun run;
        run.name = "lukv";
        const auto ratios = lookup_ratios(profile, config.sigma_target);
        BudgetAllocation a;
        a.num_layers = L;
        a.num_heads = H;
        a.budgets = budget_from_ratios(ratios, T, sg);
        a.total_budget = 0;
        for (int b : a.budgets) a.total_budget += b;
        a.solver = "lukv";
        run.allocation = std::move(a);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }
      {
        AllocatorRun run;
        run.name = "greedy";
        run.allocation = greedy_allocate(gains, L, H, B_total);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }
      if (dp_ok) {
        AllocatorRun run;
        run.name = "dp";
        run.allocation = mckp_dp_allocate(raw, L, H, B_total);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }
      {
        AllocatorRun run;
        run.name = "uniform";
        run.allocation = uniform_allocate(L, H, T, B_total);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }
      {
        AllocatorRun run;
        run.name = "pyramid";
        run.allocation =
            pyramid_allocate(L, H, T, B_total, config.pyramid_beta);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }
      {
        AllocatorRun run;
        run.name = "adaptive";
        run.allocation = adaptive_topk_allocate(metric_scores(bundle, spec),
                                                B_total,
                                                config.adaptive_alpha);
        run.nominal_total = B_total;
        runs.push_back(std::move(run));
      }

      for (AllocatorRun& run : runs) {
        // Budget conservation before flooring (lukv budgets come from the
        // per-head floor rule instead of an exact global constraint).
        if (run.name != "lukv") {
          long long total = 0;
          for (int b : run.allocation.budgets) total += b;
          if (total != run.nominal_total) ++violations;
        }
        // All allocators are evaluated under the same deployment safeguards.
        run.allocation.budgets =
            floored_budgets(run.allocation.budgets, T, sg);
        run.report = evaluate_allocation(bundle, spec, run.allocation);

        double layer_sum = 0.0, head_sum = 0.0;
        for (double v : run.report.layer_loss) layer_sum += v;
        for (double v : run.report.head_loss) head_sum += v;
        if (std::abs(layer_sum - run.report.total_loss) > 1e-9 ||
            std::abs(head_sum - run.report.total_loss) > 1e-9)
          ++violations;

        long long evaluated_total = 0;
        for (int b : run.allocation.budgets) evaluated_total += b;
        summary.row(metric_name, bundle_seed, run.name, run.nominal_total,
                    evaluated_total, run.report.total_loss);
        result.total_loss[metric_name][run.name] += run.report.total_loss;

        if (e == 0) {
          for (int l = 0; l < L; ++l)
            layer_csv.row(metric_name, run.name, l,
                          run.report.layer_loss[l]);
          for (int l = 0; l < L; ++l)
            for (int h = 0; h < H; ++h)
              head_csv.row(
                  metric_name, run.name, l, h, run.allocation.at(l, h),
                  run.report.head_loss[static_cast<std::size_t>(l) * H + h]);
        }
      }

      if (e == 0) {
        // Greedy-vs-DP table (Fig. 2a analog).
        if (dp_ok) {
          const auto rows =
              compare_solvers(bundle, spec, config.compare_sigmas);
          for (const auto& row : rows) {
            compare_csv.row(metric_name, row.sigma, row.total_budget,
                            row.greedy_relaxed, row.dp_convex, row.dp_raw,
                            row.greedy_raw);
            if (std::abs(row.greedy_relaxed - row.dp_convex) > 1e-9)
              ++violations;
            if (row.greedy_raw < row.dp_raw - 1e-9) ++violations;
          }
        }

        // Recall curves for the oracle metric and every heuristic metric.
        if (!recall_written) {
          recall_written = true;
          const Ranking orank = oracle_ranking(importance);
          std::vector<std::pair<std::string, const Ranking*>> rankers;
          rankers.emplace_back("oracle", &orank);
          std::vector<Ranking> metric_ranks;
          metric_ranks.reserve(config.metrics.size());
          for (MetricKind mk : config.metrics) {
            metric_ranks.push_back(metric_ranking(
                metric_scores(bundle, MetricSpec::defaults_for(mk))));
          }
          for (std::size_t i = 0; i < config.metrics.size(); ++i)
            rankers.emplace_back(to_string(config.metrics[i]),
                                 &metric_ranks[i]);

          for (const auto& [rname, ranking] : rankers) {
            std::vector<double> mean_acc(recall_grid.size(), 0.0);
            std::vector<double> mass_acc(recall_grid.size(), 0.0);
            double mass_total = 0.0;
            for (int l = 0; l < L; ++l)
              for (int h = 0; h < H; ++h) {
                const auto rec =
                    recall_curve(importance, {l, h}, *ranking, recall_grid);
                double head_mass = 0.0;
                for (int j = 0; j < T; ++j) head_mass += importance.at(l, h, j);
                mass_total += head_mass;
                for (std::size_t gi = 0; gi < recall_grid.size(); ++gi) {
                  recall_csv.row(l, h, rname, recall_grid[gi], rec[gi]);
                  mean_acc[gi] += rec[gi];
                  mass_acc[gi] += rec[gi] * head_mass;
                }
                // Oracle dominance check against this bundle's oracle rows.
                if (ranking != &orank) {
                  const auto oracle_rec =
                      recall_curve(importance, {l, h}, orank, recall_grid);
                  for (std::size_t gi = 0; gi < recall_grid.size(); ++gi)
                    if (oracle_rec[gi] < rec[gi]) ++violations;
                }
              }
            for (std::size_t gi = 0; gi < recall_grid.size(); ++gi)
              recall_agg_csv.row(
                  rname, recall_grid[gi],
                  mean_acc[gi] / static_cast<double>(heads),
                  mass_total > 0.0 ? mass_acc[gi] / mass_total : 1.0);
          }
        }

        // Optimality-gap decomposition at the grid budgets.
        if (mi == 0) {
          CsvFile decomp_csv(
              config.out_dir / "decomposition.csv",
              "layer,head,budget,heuristic_loss,oracle_loss,gap");
          const Ranking orank = oracle_ranking(importance);
          for (int l = 0; l < L; ++l)
            for (int h = 0; h < H; ++h)
              for (double sigma : recall_grid) {
                const int b =
                    static_cast<int>(budget_floor((1.0 - sigma) * T));
                const GapDecomposition gap =
                    decompose(importance, {l, h}, orank, mrank, b).second;
                decomp_csv.row(l, h, b, gap.heuristic_loss, gap.oracle_loss,
                               gap.optimality_gap);
                const double scale =
                    std::max(1.0, std::abs(gap.heuristic_loss) +
                                      std::abs(gap.oracle_loss) +
                                      std::abs(gap.optimality_gap));
                if (std::abs(gap.heuristic_loss - gap.oracle_loss -
                             gap.optimality_gap) > 1e-12 * scale)
                  ++violations;
                if (gap.optimality_gap < 0.0) ++violations;
              }
        }
      }
    }

    // Persist the sigma-target allocations for the first bundle.
    const TraceBundle bundle0 =
        generate_synthetic_trace(shape, config.seed, config.scenario);
    const ImportanceTensor imp0 = compute_oracle_importance(bundle0, true);
    const Ranking mrank0 = metric_ranking(metric_scores(bundle0, spec));
    const std::vector<LossCurve> raw0 = all_loss_curves(imp0, mrank0);
    std::vector<ConvexLossCurve> convex0;
    std::vector<MarginalGains> gains0;
    for (const LossCurve& c : raw0) {
      convex0.push_back(pava_convexify(c));
      gains0.push_back(marginal_gains(convex0.back()));
    }
    const BudgetAllocation g0 = greedy_allocate(gains0, L, H, B_total);
    save_allocation(g0, metric_name, g0.objective,
                    allocation_objective(raw0, g0),
                    config.out_dir /
                        ("allocation_" + metric_name + "_greedy.json"));
  }

  result.invariant_violations = violations;
  return result;
}

}  // namespace lukv
