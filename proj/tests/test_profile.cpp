#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lukv/profile.hpp"
#include "lukv/selfcheck.hpp"
#include "lukv/util.hpp"
#include "test_support.hpp"

using namespace lukv;
using lukv::testing::TempDir;

TEST_CASE("solve_ratio_grid") {
  const ModelShape shape{1, 2, 24, 4, 8};
  const TraceBundle trace =
      generate_synthetic_trace(shape, 19, Scenario::mixed);
  const MetricSpec spec{MetricKind::snapkv, 8, 3};

  SUBCASE("no compression allocates everything") {
    const std::vector<double> grid = {0.0};
    // B_total = L*H*T at rho = 0, so every head gets T and r = 0.
    const auto r = solve_ratio_grid(trace, spec, grid);
    for (double v : r) CHECK(v == 0.0);
  }
  SUBCASE("a single head is forced by the constraint") {
    const ModelShape one{1, 1, 10, 2, 0};
    const TraceBundle t = generate_synthetic_trace(one, 3, Scenario::aligned);
    const std::vector<double> grid = {0.25, 0.5};
    const auto r =
        solve_ratio_grid(t, MetricSpec{MetricKind::snapkv, 4, 1}, grid);
    // b = floor((1-rho)*10) -> r = 1 - b/10
    CHECK(r[0] == doctest::Approx(1.0 - 7.0 / 10.0));
    CHECK(r[1] == doctest::Approx(1.0 - 5.0 / 10.0));
  }
  SUBCASE("grid must be sorted and in range") {
    const std::vector<double> bad = {0.5, 0.25};
    CHECK_THROWS_AS(solve_ratio_grid(trace, spec, bad), ConfigError);
    const std::vector<double> out_of_range = {-0.1, 0.5};
    CHECK_THROWS_AS(solve_ratio_grid(trace, spec, out_of_range), ConfigError);
  }
}

TEST_CASE("aggregate_profile") {
  const std::vector<double> grid = {0.2, 0.5, 0.8};
  const Safeguards sg{};

  SUBCASE("single query is the identity up to clamp and monotonize") {
    const std::vector<std::vector<double>> q = {{0.1, 0.3, 0.7}};
    const Profile p = aggregate_profile(q, 1, 1, grid, "snapkv", 0.99, sg);
    CHECK(p.ratios == std::vector<double>{0.1, 0.3, 0.7});
    CHECK(p.query_count == 1);
  }
  SUBCASE("two queries average elementwise") {
    const std::vector<std::vector<double>> q = {{0.6, 0.6, 0.6},
                                                {0.8, 0.8, 0.8}};
    const Profile p = aggregate_profile(q, 1, 1, grid, "snapkv", 0.99, sg);
    for (double v : p.ratios) CHECK(v == doctest::Approx(0.7));
  }
  SUBCASE("non-monotone means are projected to non-decreasing") {
    const std::vector<std::vector<double>> q = {{0.5, 0.4, 0.6}};
    const Profile p = aggregate_profile(q, 1, 1, grid, "snapkv", 0.99, sg);
    CHECK(p.ratios[0] == doctest::Approx(0.45));
    CHECK(p.ratios[1] == doctest::Approx(0.45));
    CHECK(p.ratios[2] == doctest::Approx(0.6));
  }
  SUBCASE("values clamp to r_cap") {
    const std::vector<std::vector<double>> q = {{0.5, 0.9, 1.0}};
    const Profile p = aggregate_profile(q, 1, 1, grid, "snapkv", 0.95, sg);
    CHECK(p.ratios[2] == 0.95);
  }
  SUBCASE("aggregation commutes with query permutation") {
    selfcheck::CheckRng rng(71);
    std::vector<std::vector<double>> queries;
    for (int q = 0; q < 5; ++q) {
      std::vector<double> t(2 * 3);
      for (double& v : t) v = rng.uniform();
      queries.push_back(t);
    }
    const std::vector<double> g2 = {0.3, 0.6, 0.9};
    // 2 heads (1x2), grid of 3.
    const Profile a = aggregate_profile(queries, 1, 2, g2, "m", 0.99, sg);
    std::reverse(queries.begin(), queries.end());
    const Profile b = aggregate_profile(queries, 1, 2, g2, "m", 0.99, sg);
    for (std::size_t i = 0; i < a.ratios.size(); ++i)
      CHECK(a.ratios[i] == doctest::Approx(b.ratios[i]).epsilon(1e-15));
  }
  SUBCASE("shape mismatches are rejected") {
    const std::vector<std::vector<double>> q = {{0.1, 0.2}};
    CHECK_THROWS_AS(aggregate_profile(q, 1, 1, grid, "m", 0.99, sg),
                    ConfigError);
  }
}

TEST_CASE("lookup_ratios") {
  Profile p;
  p.metric = "snapkv";
  p.num_layers = 1;
  p.num_heads = 1;
  p.grid = {0.5, 0.9};
  p.ratios = {0.4, 0.8};

  SUBCASE("exact grid hits return stored values") {
    CHECK(lookup_ratios(p, 0.5)[0] == 0.4);
    CHECK(lookup_ratios(p, 0.9)[0] == 0.8);
  }
  SUBCASE("linear interpolation between grid points") {
    CHECK(lookup_ratios(p, 0.7)[0] == doctest::Approx(0.6).epsilon(1e-15));
  }
  SUBCASE("clamping outside the grid range") {
    CHECK(lookup_ratios(p, 0.95)[0] == 0.8);
    CHECK(lookup_ratios(p, 0.1)[0] == 0.4);
  }
  SUBCASE("monotone stored ratios interpolate monotonically") {
    double prev = -1.0;
    for (double s = 0.0; s <= 1.0; s += 0.05) {
      const double r = lookup_ratios(p, s)[0];
      CHECK(r >= prev);
      prev = r;
    }
  }
  SUBCASE("empty profiles are rejected") {
    Profile empty;
    CHECK_THROWS_AS(lookup_ratios(empty, 0.5), ConfigError);
  }
}

TEST_CASE("budget_from_ratios") {
  Safeguards sg;
  sg.sink_size = 4;
  sg.recent_window = 32;

  SUBCASE("floor rule") {
    const std::vector<double> r = {0.8};
    CHECK(budget_from_ratios(r, 1000, sg)[0] == 200);
  }
  SUBCASE("full compression clamps to the 99% cap and the safeguard floor") {
    const std::vector<double> r = {1.0};
    CHECK(budget_from_ratios(r, 100, sg)[0] == 36);  // sink 4 + window 32
  }
  SUBCASE("no compression keeps every token") {
    const std::vector<double> r = {0.0};
    CHECK(budget_from_ratios(r, 100, sg)[0] == 100);
  }
  SUBCASE("one percent minimum retention") {
    Safeguards tiny;
    tiny.sink_size = 1;
    tiny.recent_window = 1;
    const std::vector<double> r = {0.999};
    // cap 0.99 -> floor((1-0.99)*1000) = 10 >= ceil(0.01*1000)
    CHECK(budget_from_ratios(r, 1000, tiny)[0] == 10);
  }
  SUBCASE("window larger than the context is a config error") {
    const std::vector<double> r = {0.5};
    CHECK_THROWS_AS(budget_from_ratios(r, 20, sg), ConfigError);
  }
  SUBCASE("ratios outside [0,1] are rejected") {
    const std::vector<double> r = {1.5};
    CHECK_THROWS_AS(budget_from_ratios(r, 100, sg), ConfigError);
  }
}

TEST_CASE("apply_eviction") {
  Safeguards sg;
  sg.sink_size = 2;
  sg.recent_window = 1;

  // Ranking prefers positions 4, 5, 0, 1, ... (0-based).
  Ranking rank = lukv::testing::make_ranking({4, 5, 0, 1, 2, 3, 6, 7, 8, 9});

  SUBCASE("sinks, window, then ranked fill") {
    const std::vector<int> budgets = {4};
    const auto retained = apply_eviction(rank, budgets, sg);
    CHECK(retained[0] == std::vector<int>{0, 1, 4, 9});
  }
  SUBCASE("budget equal to the safeguards keeps only those") {
    const std::vector<int> budgets = {3};
    const auto retained = apply_eviction(rank, budgets, sg);
    CHECK(retained[0] == std::vector<int>{0, 1, 9});
  }
  SUBCASE("full budget keeps everything") {
    const std::vector<int> budgets = {10};
    const auto retained = apply_eviction(rank, budgets, sg);
    CHECK(retained[0].size() == 10);
  }
  SUBCASE("sizes always match the budget exactly") {
    for (int b = 0; b <= 10; ++b) {
      const std::vector<int> budgets = {b};
      CHECK(apply_eviction(rank, budgets, sg)[0].size() ==
            static_cast<std::size_t>(b));
    }
  }
}

TEST_CASE("profile serialization round trips byte-identically") {
  TempDir dir("profile_roundtrip");
  selfcheck::CheckRng rng(72);
  std::vector<std::vector<double>> queries;
  for (int q = 0; q < 3; ++q) {
    std::vector<double> t(2 * 2 * 4);
    for (double& v : t) v = rng.uniform();
    queries.push_back(t);
  }
  const std::vector<double> grid = {0.1, 0.4, 0.7, 0.99};
  Safeguards sg;
  sg.recent_window = 8;
  const Profile p = aggregate_profile(queries, 2, 2, grid, "keydiff", 0.99, sg);

  save_profile(p, dir.path() / "p1.json");
  const Profile loaded = load_profile(dir.path() / "p1.json");
  CHECK(loaded == p);
  save_profile(loaded, dir.path() / "p2.json");
  CHECK(lukv::testing::slurp(dir.path() / "p1.json") ==
        lukv::testing::slurp(dir.path() / "p2.json"));
}

TEST_CASE("global ratio fidelity without safeguards") {
  // With safeguards disabled, the summed budgets from a lookup stay within
  // the floor-error band of the target ratio.
  const ModelShape shape{2, 4, 64, 4, 8};
  const MetricSpec spec = MetricSpec::defaults_for(MetricKind::snapkv);
  const std::vector<double> grid = default_ratio_grid();
  std::vector<std::vector<double>> queries;
  for (int q = 0; q < 4; ++q)
    queries.push_back(solve_ratio_grid(
        generate_synthetic_trace(shape, 500 + q, Scenario::mixed), spec,
        grid));
  Safeguards off;
  off.sink_size = 0;
  off.recent_window = 0;
  off.max_compression = 1.0 - 1e-12;
  const Profile p =
      aggregate_profile(queries, 2, 4, grid, "snapkv", 1.0, off);

  const int T = shape.prefill_len;
  const double heads = static_cast<double>(shape.head_count());
  for (double sigma : {0.2, 0.5, 0.8}) {
    const auto r = lookup_ratios(p, sigma);
    long long total = 0;
    for (int b : budget_from_ratios(r, T, off)) total += b;
    const double achieved = static_cast<double>(total) / (heads * T);
    CHECK(achieved <= 1.0 - sigma + heads / (heads * T) + 1e-9);
    CHECK(achieved >= 1.0 - sigma - heads / (heads * T) - 1e-9);
  }
}

TEST_CASE("sink positions survive every eviction") {
  const ModelShape shape{2, 2, 64, 4, 8};
  const TraceBundle bundle =
      generate_synthetic_trace(shape, 23, Scenario::misaligned);
  Safeguards sg;
  sg.sink_size = 4;
  sg.recent_window = 8;
  const Ranking rank = metric_ranking(
      metric_scores(bundle, MetricSpec{MetricKind::snapkv, 8, 7}));
  const std::vector<double> ratios(shape.head_count(), 0.85);
  const auto budgets = budget_from_ratios(ratios, 64, sg);
  for (const auto& set : apply_eviction(rank, budgets, sg))
    for (int j = 0; j < 4; ++j)
      CHECK(std::binary_search(set.begin(), set.end(), j));
}

TEST_CASE("exact-total budgeting redistributes the flooring remainder") {
  Safeguards sg;
  sg.sink_size = 1;
  sg.recent_window = 1;
  const std::vector<double> r = {0.25, 0.25, 0.5};
  // Exact budgets are {7.5, 7.5, 5.0}; plain flooring loses one unit.
  const auto plain = budget_from_ratios(r, 10, sg);
  CHECK(plain == std::vector<int>{7, 7, 5});
  const auto exact = budget_from_ratios(r, 10, sg, true);
  CHECK(exact == std::vector<int>{8, 7, 5});

  SUBCASE("no remainder leaves budgets unchanged") {
    const std::vector<double> whole = {0.2, 0.5};
    CHECK(budget_from_ratios(whole, 10, sg, true) ==
          budget_from_ratios(whole, 10, sg, false));
  }
}

TEST_CASE("ratio grid entries are one minus the greedy budget share") {
  const ModelShape shape{1, 2, 20, 3, 0};
  const TraceBundle trace = generate_synthetic_trace(shape, 29, Scenario::mixed);
  const MetricSpec spec{MetricKind::snapkv, 6, 3};
  const std::vector<double> grid = {0.3, 0.7};
  const auto r = solve_ratio_grid(trace, spec, grid);

  const ImportanceTensor imp = compute_oracle_importance(trace, true);
  const Ranking rank = metric_ranking(metric_scores(trace, spec));
  std::vector<MarginalGains> gains;
  for (const LossCurve& c : all_loss_curves(imp, rank))
    gains.push_back(marginal_gains(pava_convexify(c)));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const long long B = budget_floor((1.0 - grid[g]) * 2 * 20);
    const BudgetAllocation alloc = greedy_allocate(gains, 1, 2, B);
    for (int h = 0; h < 2; ++h)
      CHECK(r[static_cast<std::size_t>(h) * grid.size() + g] ==
            1.0 - alloc.budgets[h] / 20.0);
  }
}

TEST_CASE("loaded profiles are validated") {
  lukv::testing::TempDir dir("profile_validate");
  std::ofstream bad(dir.path() / "bad.json");
  bad << R"({"schema_version":1,"metric":"snapkv","L":1,"H":1,)"
      << R"("grid":[0.9,0.5],"ratios":[[[0.1,0.2]]],"M":1,"r_cap":0.99,)"
      << R"("safeguards":{"sink":4,"window":32,"max_compression":0.99}})";
  bad.close();
  CHECK_THROWS_AS(load_profile(dir.path() / "bad.json"), ValidationError);
}
