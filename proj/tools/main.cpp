// lukv: analyze attention traces, build per-head eviction-loss curves, solve
// the global cache-budget allocation, and profile compression ratios offline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lukv/allocation_io.hpp"
#include "lukv/evaluate.hpp"
#include "lukv/selftest.hpp"
#include "lukv/util.hpp"

namespace {

using namespace lukv;

ModelShape parse_shape(const std::string& text, int head_dim) {
  std::vector<int> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(std::stoi(item));
  if (parts.size() != 4)
    throw ConfigError("--shape expects L,H,T,K_max");
  ModelShape shape{parts[0], parts[1], parts[2], parts[3], head_dim};
  shape.validate();
  return shape;
}

std::vector<double> parse_reals(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw ConfigError("expected a comma-separated list");
  return out;
}

MetricSpec resolve_metric(const std::string& name, int window, int kernel) {
  MetricSpec spec = MetricSpec::defaults_for(metric_from_string(name));
  if (window > 0) spec.window_size = window;
  if (kernel > 0) spec.kernel_size = kernel;
  return spec;
}

struct Curves {
  ImportanceTensor importance;
  Ranking ranking;
  std::vector<LossCurve> raw;
  std::vector<ConvexLossCurve> convex;
  std::vector<MarginalGains> gains;
};

Curves build_curves(const TraceBundle& trace, const MetricSpec& spec) {
  Curves c;
  c.importance = compute_oracle_importance(trace, true);
  c.ranking = metric_ranking(metric_scores(trace, spec));
  c.raw = all_loss_curves(c.importance, c.ranking);
  for (const LossCurve& curve : c.raw) {
    c.convex.push_back(pava_convexify(curve));
    c.gains.push_back(marginal_gains(c.convex.back()));
  }
  return c;
}

int cmd_gen(const std::string& shape_text, int head_dim, std::uint64_t seed,
            const std::string& scenario, const std::string& out) {
  const ModelShape shape = parse_shape(shape_text, head_dim);
  const TraceBundle bundle =
      generate_synthetic_trace(shape, seed, scenario_from_string(scenario));
  const auto manifest = save_trace(bundle, out);
  std::cout << "wrote " << manifest.string() << "\n";
  return 0;
}

int cmd_score(const std::string& trace_dir, const std::string& metric,
              int window, int kernel, const std::string& out) {
  const TraceBundle trace = load_trace(trace_dir);
  const MetricSpec spec = resolve_metric(metric, window, kernel);
  const ScoreMatrix scores = metric_scores(trace, spec);

  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + out + " for write");
  f << "layer,head,position,score\n";
  for (int l = 0; l < scores.num_layers; ++l)
    for (int h = 0; h < scores.num_heads; ++h)
      for (int j = 0; j < scores.positions; ++j)
        f << l << "," << h << "," << j << ","
          << format_real(scores.at(l, h, j)) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_solve(const std::string& trace_dir, const std::string& metric,
              double sigma, long long budget, const std::string& solver,
              double alpha, double beta, const std::string& out) {
  const TraceBundle trace = load_trace(trace_dir);
  const ModelShape& s = trace.shape;
  const MetricSpec spec = resolve_metric(metric, 0, 0);
  const Curves c = build_curves(trace, spec);

  long long B = budget;
  if (B < 0) {
    if (sigma < 0.0 || sigma > 1.0)
      throw ConfigError("provide --sigma in [0,1] or --budget");
    B = budget_floor((1.0 - sigma) * static_cast<double>(s.head_count()) *
                     s.prefill_len);
  }

  BudgetAllocation alloc;
  switch (solver_from_string(solver)) {
    case SolverKind::greedy:
      alloc = greedy_allocate(c.gains, s.num_layers, s.num_heads, B);
      break;
    case SolverKind::dp:
      alloc = mckp_dp_allocate(c.raw, s.num_layers, s.num_heads, B);
      break;
    case SolverKind::brute:
      alloc = brute_force_allocate(c.raw, s.num_layers, s.num_heads, B);
      break;
    case SolverKind::uniform:
      alloc = uniform_allocate(s.num_layers, s.num_heads, s.prefill_len, B);
      break;
    case SolverKind::pyramid:
      alloc = pyramid_allocate(s.num_layers, s.num_heads, s.prefill_len, B,
                               beta);
      break;
    case SolverKind::adaptive_topk:
      alloc = adaptive_topk_allocate(metric_scores(trace, spec), B, alpha);
      break;
  }

  save_allocation(alloc, to_string(spec.kind),
                  allocation_objective(c.convex, alloc),
                  allocation_objective(c.raw, alloc), out);
  std::cout << "wrote " << out << " (raw objective "
            << format_real(allocation_objective(c.raw, alloc)) << ")\n";
  return 0;
}

int cmd_profile_build(const std::vector<std::string>& trace_dirs,
                      const std::string& metric, const std::string& grid_text,
                      int sink, double max_compression,
                      const std::string& out) {
  const MetricSpec spec = resolve_metric(metric, 0, 0);
  const std::vector<double> grid =
      grid_text.empty() ? default_ratio_grid() : parse_reals(grid_text);

  Safeguards sg = Safeguards::defaults_for(spec.kind);
  sg.sink_size = sink;
  sg.max_compression = max_compression;

  std::vector<std::vector<double>> per_query;
  int L = 0, H = 0;
  for (const std::string& dir : trace_dirs) {
    const TraceBundle trace = load_trace(dir);
    if (per_query.empty()) {
      L = trace.shape.num_layers;
      H = trace.shape.num_heads;
    } else if (trace.shape.num_layers != L || trace.shape.num_heads != H) {
      throw ConfigError("calibration traces must share L and H");
    }
    per_query.push_back(solve_ratio_grid(trace, spec, grid));
  }
  const Profile profile = aggregate_profile(
      per_query, L, H, grid, to_string(spec.kind), max_compression, sg);
  save_profile(profile, out);
  std::cout << "wrote " << out << " (M=" << profile.query_count << ")\n";
  return 0;
}

int cmd_profile_apply(const std::string& profile_path, double sigma,
                      int tokens, bool exact_total, const std::string& out) {
  const Profile profile = load_profile(profile_path);
  const auto ratios = lookup_ratios(profile, sigma);
  const auto budgets =
      budget_from_ratios(ratios, tokens, profile.safeguards, exact_total);

  BudgetAllocation alloc;
  alloc.num_layers = profile.num_layers;
  alloc.num_heads = profile.num_heads;
  alloc.budgets = budgets;
  for (int b : budgets) alloc.total_budget += b;
  alloc.solver = "lukv";
  save_allocation(alloc, profile.metric, 0.0, 0.0, out);
  std::cout << "wrote " << out << " (total budget " << alloc.total_budget
            << ")\n";
  return 0;
}

int cmd_eval(const std::string& trace_dir, const std::string& allocation_path,
             const std::string& out_dir) {
  const TraceBundle trace = load_trace(trace_dir);
  const LoadedAllocation loaded = load_allocation(allocation_path);
  const MetricSpec spec = resolve_metric(loaded.metric, 0, 0);
  std::filesystem::create_directories(out_dir);

  const EvalReport report =
      evaluate_allocation(trace, spec, loaded.allocation);
  const std::filesystem::path dir(out_dir);

  {
    std::ofstream f(dir / "layer_loss.csv", std::ios::binary);
    f << "layer,loss\n";
    for (int l = 0; l < report.num_layers; ++l)
      f << l << "," << format_real(report.layer_loss[l]) << "\n";
  }
  {
    std::ofstream f(dir / "head_loss.csv", std::ios::binary);
    f << "layer,head,budget,loss\n";
    for (int l = 0; l < report.num_layers; ++l)
      for (int h = 0; h < report.num_heads; ++h)
        f << l << "," << h << "," << loaded.allocation.at(l, h) << ","
          << format_real(
                 report.head_loss[static_cast<std::size_t>(l) *
                                      report.num_heads +
                                  h])
          << "\n";
  }

  const ImportanceTensor imp = compute_oracle_importance(trace, true);
  const Ranking orank = oracle_ranking(imp);
  const Ranking mrank = metric_ranking(metric_scores(trace, spec));
  const std::vector<double> sigmas = default_ratio_grid();
  {
    std::ofstream f(dir / "recall.csv", std::ios::binary);
    f << "layer,head,metric,sigma,recall\n";
    for (int l = 0; l < report.num_layers; ++l)
      for (int h = 0; h < report.num_heads; ++h) {
        const auto orec = recall_curve(imp, {l, h}, orank, sigmas);
        const auto mrec = recall_curve(imp, {l, h}, mrank, sigmas);
        for (std::size_t g = 0; g < sigmas.size(); ++g) {
          f << l << "," << h << ",oracle," << format_real(sigmas[g]) << ","
            << format_real(orec[g]) << "\n";
          f << l << "," << h << "," << loaded.metric << ","
            << format_real(sigmas[g]) << "," << format_real(mrec[g]) << "\n";
        }
      }
  }
  {
    std::ofstream f(dir / "decomposition.csv", std::ios::binary);
    f << "layer,head,budget,heuristic_loss,oracle_loss,gap\n";
    for (int l = 0; l < report.num_layers; ++l)
      for (int h = 0; h < report.num_heads; ++h)
        for (double sigma : sigmas) {
          const int b = static_cast<int>(
              budget_floor((1.0 - sigma) * trace.shape.prefill_len));
          const GapDecomposition gap =
              decompose(imp, {l, h}, orank, mrank, b).second;
          f << l << "," << h << "," << b << ","
            << format_real(gap.heuristic_loss) << ","
            << format_real(gap.oracle_loss) << ","
            << format_real(gap.optimality_gap) << "\n";
        }
  }
  std::cout << "wrote reports to " << out_dir << " (total loss "
            << format_real(report.total_loss) << ")\n";
  return 0;
}

int cmd_compare(const std::string& trace_dir, const std::string& metric,
                const std::string& sigmas_text, const std::string& out) {
  const TraceBundle trace = load_trace(trace_dir);
  const MetricSpec spec = resolve_metric(metric, 0, 0);
  const std::vector<double> sigmas = parse_reals(sigmas_text);
  const auto rows = compare_solvers(trace, spec, sigmas);

  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + out + " for write");
  f << "sigma,B_total,greedy_relaxed,dp_convex,dp_raw,greedy_raw\n";
  for (const auto& row : rows)
    f << format_real(row.sigma) << "," << row.total_budget << ","
      << format_real(row.greedy_relaxed) << "," << format_real(row.dp_convex)
      << "," << format_real(row.dp_raw) << "," << format_real(row.greedy_raw)
      << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_run(const std::string& shape_text, int head_dim, std::uint64_t seed,
            const std::string& scenario, const std::string& metrics_text,
            double sigma, const std::string& grid_text, int queries,
            int bundles, const std::string& out_dir) {
  PipelineConfig config;
  config.shape = parse_shape(shape_text, head_dim);
  config.seed = seed;
  config.scenario = scenario_from_string(scenario);
  config.metrics.clear();
  {
    std::stringstream ss(metrics_text);
    std::string item;
    while (std::getline(ss, item, ','))
      config.metrics.push_back(metric_from_string(item));
  }
  config.sigma_target = sigma;
  if (!grid_text.empty()) config.grid = parse_reals(grid_text);
  config.calibration_queries = queries;
  config.eval_bundles = bundles;
  config.out_dir = out_dir;

  const PipelineResult result = run_pipeline(config);
  for (const auto& [metric, table] : result.total_loss) {
    std::cout << metric << ":";
    for (const auto& [allocator, loss] : table)
      std::cout << " " << allocator << "=" << format_real(loss);
    std::cout << "\n";
  }
  if (result.invariant_violations > 0) {
    std::cerr << "invariant violations: " << result.invariant_violations
              << "\n";
    return 3;
  }
  std::cout << "wrote pipeline artifacts to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LU-KV: long-horizon utility KV cache budget allocation"};
  app.require_subcommand(1);

  std::string shape_text = "2,4,128,8";
  int head_dim = 16;
  std::uint64_t seed = 42;
  std::string scenario = "misaligned";
  std::string trace_dir, out, metric = "snapkv", solver = "greedy";
  std::string grid_text, sigmas_text = "0.5,0.8,0.9", metrics_text = "snapkv";
  std::string profile_path, allocation_path;
  std::vector<std::string> trace_dirs;
  int window = 0, kernel = 0, tokens = 0, sink = 4;
  bool exact_total = false;
  int queries = 30, bundles = 1;
  double sigma = -1.0, alpha = 0.20, beta = 20.0, max_compression = 0.99;
  long long budget = -1;

  auto* gen = app.add_subcommand("gen", "generate a synthetic trace");
  gen->add_option("--shape", shape_text, "L,H,T,K_max")->required();
  gen->add_option("--head-dim", head_dim, "key vector dimension (0 disables)");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--scenario", scenario, "aligned|misaligned|mixed");
  gen->add_option("--out", out, "output trace directory")->required();

  auto* score = app.add_subcommand("score", "score cached positions");
  score->add_option("--trace", trace_dir)->required();
  score->add_option("--metric", metric, "snapkv|keydiff|oracle");
  score->add_option("--window", window, "observation window override");
  score->add_option("--kernel", kernel, "pooling kernel override");
  score->add_option("--out", out, "output CSV")->required();

  auto* solve = app.add_subcommand("solve", "allocate the global budget");
  solve->add_option("--trace", trace_dir)->required();
  solve->add_option("--metric", metric, "snapkv|keydiff|oracle");
  solve->add_option("--sigma", sigma, "global compression ratio");
  solve->add_option("--budget", budget, "explicit B_total");
  solve->add_option("--solver", solver,
                    "greedy|dp|brute|uniform|pyramid|adaptive");
  solve->add_option("--alpha", alpha, "adaptive safeguard fraction");
  solve->add_option("--beta", beta, "pyramid ramp factor");
  solve->add_option("--out", out, "output allocation.json")->required();

  auto* profile = app.add_subcommand("profile", "offline profiling");
  auto* pbuild = profile->add_subcommand("build", "aggregate a profile");
  pbuild->add_option("--traces", trace_dirs, "calibration trace dirs")
      ->required()
      ->expected(-1);
  pbuild->add_option("--metric", metric, "snapkv|keydiff|oracle");
  pbuild->add_option("--grid", grid_text, "comma-separated global ratios");
  pbuild->add_option("--sink", sink, "attention sink size");
  pbuild->add_option("--max-compression", max_compression);
  pbuild->add_option("--out", out, "output profile.json")->required();
  auto* papply = profile->add_subcommand("apply", "look up and budget");
  papply->add_option("--profile", profile_path)->required();
  papply->add_option("--sigma", sigma, "target global ratio")->required();
  papply->add_option("--tokens", tokens, "prefill length T")->required();
  papply->add_flag("--exact-total", exact_total,
                   "redistribute the flooring remainder by fractional part");
  papply->add_option("--out", out, "output budgets json")->required();

  auto* eval = app.add_subcommand("eval", "evaluate an allocation");
  eval->add_option("--trace", trace_dir)->required();
  eval->add_option("--allocation", allocation_path)->required();
  eval->add_option("--out", out, "output directory")->required();

  auto* compare = app.add_subcommand("compare", "greedy vs DP table");
  compare->add_option("--trace", trace_dir)->required();
  compare->add_option("--metric", metric, "snapkv|keydiff|oracle");
  compare->add_option("--sigmas", sigmas_text, "comma-separated ratios");
  compare->add_option("--out", out, "output CSV")->required();

  auto* run = app.add_subcommand("run", "full pipeline on synthetic traces");
  run->add_option("--shape", shape_text, "L,H,T,K_max");
  run->add_option("--head-dim", head_dim);
  run->add_option("--seed", seed);
  run->add_option("--scenario", scenario, "aligned|misaligned|mixed");
  run->add_option("--metrics", metrics_text, "comma-separated metric list");
  run->add_option("--sigma", sigma, "target global ratio");
  run->add_option("--grid", grid_text, "profile grid override");
  run->add_option("--queries", queries, "calibration queries M");
  run->add_option("--bundles", bundles, "evaluation bundles");
  run->add_option("--out", out, "output directory")->required();

  auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen(shape_text, head_dim, seed, scenario, out);
    if (score->parsed())
      return cmd_score(trace_dir, metric, window, kernel, out);
    if (solve->parsed())
      return cmd_solve(trace_dir, metric, sigma, budget, solver, alpha, beta,
                       out);
    if (pbuild->parsed())
      return cmd_profile_build(trace_dirs, metric, grid_text, sink,
                               max_compression, out);
    if (papply->parsed())
      return cmd_profile_apply(profile_path, sigma, tokens, exact_total, out);
    if (profile->parsed())
      throw ConfigError("profile requires a build or apply subcommand");
    if (eval->parsed()) return cmd_eval(trace_dir, allocation_path, out);
    if (compare->parsed())
      return cmd_compare(trace_dir, metric, sigmas_text, out);
    if (run->parsed()) {
      const double s = sigma < 0.0 ? 0.8 : sigma;
      return cmd_run(shape_text, head_dim, seed, scenario, metrics_text, s,
                     grid_text, queries, bundles, out);
    }
    if (selftest->parsed()) {
      const int failures = lukv::selftest::run_all(std::cout);
      return failures == 0 ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 4;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
