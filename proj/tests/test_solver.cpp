#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lukv/selfcheck.hpp"
#include "lukv/solver.hpp"
#include "test_support.hpp"

using namespace lukv;
using lukv::selfcheck::CheckRng;
using lukv::testing::make_curve;

namespace {

MarginalGains gains_of(HeadIndex head, std::vector<double> gains) {
  MarginalGains g;
  g.head = head;
  g.base_loss = std::accumulate(gains.begin(), gains.end(), 0.0);
  g.final_loss = 0.0;
  g.gains = std::move(gains);
  return g;
}

LossCurve random_nonincreasing_curve(CheckRng& rng, int positions) {
  std::vector<double> values(positions + 1, 0.0);
  for (int i = positions - 1; i >= 0; --i) {
    double g = std::exp(rng.normal());
    if (rng.uniform() < 0.1) g = 0.0;
    values[i] = values[i + 1] + g;
  }
  return make_curve(std::move(values));
}

}  // namespace

TEST_CASE("pava_convexify") {
  SUBCASE("worked example pools the violating middle gains") {
    const ConvexLossCurve c =
        pava_convexify(make_curve({10.0, 6.0, 5.0, 1.0, 0.0}));
    CHECK(c.values == std::vector<double>{10.0, 6.0, 3.5, 1.0, 0.0});
    CHECK(c.contact[0] == 1);
    CHECK(c.contact[1] == 1);
    CHECK(c.contact[2] == 0);
    CHECK(c.contact[3] == 1);
    CHECK(c.contact[4] == 1);
  }
  SUBCASE("already-convex input is unchanged") {
    const std::vector<double> in = {6.0, 3.0, 1.0, 0.0};
    const ConvexLossCurve c = pava_convexify(make_curve(in));
    CHECK(c.values == in);
    for (char f : c.contact) CHECK(f == 1);
  }
  SUBCASE("constant input is unchanged") {
    const std::vector<double> in = {4.0, 4.0, 4.0, 4.0};
    CHECK(pava_convexify(make_curve(in)).values == in);
  }
  SUBCASE("increasing segments are invalid") {
    CHECK_THROWS_AS(pava_convexify(make_curve({5.0, 6.0, 1.0})),
                    ValidationError);
  }
  SUBCASE("matches the independent lower-hull construction") {
    CheckRng rng(61);
    for (int trial = 0; trial < 100; ++trial) {
      const int T = 1 + static_cast<int>(rng.bits() % 64);
      const LossCurve raw = random_nonincreasing_curve(rng, T);
      const ConvexLossCurve fast = pava_convexify(raw);
      const auto hull = selfcheck::lower_convex_hull(raw.values);
      const double tol = 1e-9 * std::max(1.0, raw.values.front());
      for (int i = 0; i <= T; ++i)
        CHECK(std::abs(fast.values[i] - hull[i]) <= tol);
    }
  }
}

TEST_CASE("marginal gains telescope the surrogate") {
  SUBCASE("direct differences of the worked example") {
    const MarginalGains g =
        marginal_gains(pava_convexify(make_curve({10.0, 6.0, 5.0, 1.0, 0.0})));
    CHECK(g.gains == std::vector<double>{4.0, 2.5, 2.5, 1.0});
    CHECK(g.base_loss == 10.0);
    CHECK(g.final_loss == 0.0);
  }
  SUBCASE("constant surrogate has zero gains") {
    const MarginalGains g =
        marginal_gains(pava_convexify(make_curve({2.0, 2.0, 2.0})));
    CHECK(g.gains == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("gains sum to the total drop and never increase") {
    CheckRng rng(62);
    for (int trial = 0; trial < 50; ++trial) {
      const int T = 1 + static_cast<int>(rng.bits() % 48);
      const LossCurve raw = random_nonincreasing_curve(rng, T);
      const MarginalGains g = marginal_gains(pava_convexify(raw));
      const double sum =
          std::accumulate(g.gains.begin(), g.gains.end(), 0.0);
      const double scale = std::max(1.0, g.base_loss);
      CHECK(std::abs(sum - (g.base_loss - g.final_loss)) <= 1e-9 * scale);
      for (std::size_t i = 1; i < g.gains.size(); ++i) {
        CHECK(g.gains[i] <= g.gains[i - 1] + 1e-12 * scale);
        CHECK(g.gains[i] >= 0.0);
      }
    }
  }
}

TEST_CASE("greedy allocation") {
  SUBCASE("two-head example, brute-forced") {
    // Enumeration over {(3,0):9,(2,1):12,(1,2):11,(0,3):7} puts the optimum
    // at b=(2,1) with total gain 12.
    const std::vector<MarginalGains> gains = {
        gains_of({0, 0}, {5.0, 3.0, 1.0}), gains_of({0, 1}, {4.0, 2.0, 1.0})};
    const BudgetAllocation a = greedy_allocate(gains, 1, 2, 3);
    CHECK(a.budgets == std::vector<int>{2, 1});
    // Relaxed loss: (9 + 7) total mass minus the 12 units of gain picked.
    CHECK(a.objective == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("zero budget allocates nothing") {
    const std::vector<MarginalGains> gains = {gains_of({0, 0}, {2.0, 1.0})};
    const BudgetAllocation a = greedy_allocate(gains, 1, 1, 0);
    CHECK(a.budgets == std::vector<int>{0});
    CHECK(a.objective == gains[0].base_loss);
  }
  SUBCASE("full capacity fills every head") {
    const std::vector<MarginalGains> gains = {
        gains_of({0, 0}, {2.0, 1.0}), gains_of({0, 1}, {3.0, 0.5})};
    const BudgetAllocation a = greedy_allocate(gains, 1, 2, 4);
    CHECK(a.budgets == std::vector<int>{2, 2});
    CHECK(a.objective == doctest::Approx(0.0));
  }
  SUBCASE("budgets beyond capacity are infeasible") {
    const std::vector<MarginalGains> gains = {gains_of({0, 0}, {1.0})};
    CHECK_THROWS_AS(greedy_allocate(gains, 1, 1, 2), InfeasibleError);
    CHECK_THROWS_AS(greedy_allocate(gains, 1, 1, -1), InfeasibleError);
  }
  SUBCASE("gain ties break toward the earlier head") {
    const std::vector<MarginalGains> gains = {
        gains_of({0, 0}, {1.0, 1.0}), gains_of({0, 1}, {1.0, 1.0})};
    const BudgetAllocation a = greedy_allocate(gains, 1, 2, 1);
    CHECK(a.budgets == std::vector<int>{1, 0});
  }
  SUBCASE("greedy solutions nest as the budget grows") {
    CheckRng rng(63);
    const int heads = 6, T = 20;
    std::vector<MarginalGains> gains;
    for (int h = 0; h < heads; ++h)
      gains.push_back(
          marginal_gains(pava_convexify(random_nonincreasing_curve(rng, T))));
    BudgetAllocation prev = greedy_allocate(gains, 1, heads, 0);
    for (long long B = 1; B <= heads * T; ++B) {
      const BudgetAllocation cur = greedy_allocate(gains, 1, heads, B);
      int bumps = 0;
      for (int i = 0; i < heads; ++i) {
        CHECK(cur.budgets[i] >= prev.budgets[i]);
        bumps += cur.budgets[i] - prev.budgets[i];
      }
      CHECK(bumps == 1);
      prev = cur;
    }
  }
}

TEST_CASE("MCKP dynamic program") {
  SUBCASE("two-head example, brute-forced") {
    // Enumeration over {(0,3):10,(1,2):12,(2,1):6,(3,0):10} puts the optimum
    // at b=(2,1) with loss 6.
    const std::vector<LossCurve> curves = {
        make_curve({10.0, 9.0, 2.0, 2.0}), make_curve({8.0, 4.0, 3.0, 0.0})};
    const BudgetAllocation a = mckp_dp_allocate(curves, 1, 2, 3);
    CHECK(a.budgets == std::vector<int>{2, 1});
    CHECK(a.objective == 6.0);
  }
  SUBCASE("a single head takes the whole budget") {
    const std::vector<LossCurve> curves = {make_curve({5.0, 3.0, 1.5, 0.0})};
    const BudgetAllocation a = mckp_dp_allocate(curves, 1, 1, 2);
    CHECK(a.budgets == std::vector<int>{2});
    CHECK(a.objective == 1.5);
  }
  SUBCASE("convex identical curves match the greedy relaxation") {
    const std::vector<LossCurve> curves = {
        make_curve({6.0, 3.0, 1.0, 0.0}), make_curve({6.0, 3.0, 1.0, 0.0})};
    std::vector<MarginalGains> gains;
    std::vector<ConvexLossCurve> convex;
    for (const auto& c : curves) {
      convex.push_back(pava_convexify(c));
      gains.push_back(marginal_gains(convex.back()));
    }
    for (long long B = 0; B <= 6; ++B) {
      const double dp = mckp_dp_allocate(curves, 1, 2, B).objective;
      const double greedy = greedy_allocate(gains, 1, 2, B).objective;
      CHECK(dp == doctest::Approx(greedy).epsilon(1e-12));
    }
  }
  SUBCASE("infeasible budgets are reported") {
    const std::vector<LossCurve> curves = {make_curve({1.0, 0.0})};
    CHECK_THROWS_AS(mckp_dp_allocate(curves, 1, 1, 5), InfeasibleError);
  }
}

TEST_CASE("brute force reference solver") {
  SUBCASE("reproduces the DP example") {
    const std::vector<LossCurve> curves = {
        make_curve({10.0, 9.0, 2.0, 2.0}), make_curve({8.0, 4.0, 3.0, 0.0})};
    const BudgetAllocation a = brute_force_allocate(curves, 1, 2, 3);
    CHECK(a.objective == 6.0);
    CHECK(a.budgets == std::vector<int>{2, 1});
  }
  SUBCASE("zero budget") {
    const std::vector<LossCurve> curves = {make_curve({4.0, 0.0})};
    CHECK(brute_force_allocate(curves, 1, 1, 0).budgets ==
          std::vector<int>{0});
  }
  SUBCASE("matches DP exactly on random tiny instances") {
    CheckRng rng(64);
    for (int trial = 0; trial < 20; ++trial) {
      const int heads = 1 + static_cast<int>(rng.bits() % 3);
      const int T = 2 + static_cast<int>(rng.bits() % 3);
      std::vector<LossCurve> curves;
      for (int h = 0; h < heads; ++h)
        curves.push_back(random_nonincreasing_curve(rng, T));
      for (long long B = 0; B <= static_cast<long long>(heads) * T; ++B)
        CHECK(mckp_dp_allocate(curves, 1, heads, B).objective ==
              brute_force_allocate(curves, 1, heads, B).objective);
    }
  }
  SUBCASE("guardrail rejects oversized instances") {
    std::vector<LossCurve> curves(6, make_curve({1.0, 0.0}));
    CHECK_THROWS_AS(brute_force_allocate(curves, 1, 6, 0), ConfigError);
  }
}

TEST_CASE("scaling every curve leaves argmin budgets unchanged") {
  CheckRng rng(65);
  const int heads = 4, T = 12;
  std::vector<LossCurve> curves;
  for (int h = 0; h < heads; ++h)
    curves.push_back(random_nonincreasing_curve(rng, T));
  for (const double c : {0.5, 4.0, 3.0}) {
    std::vector<LossCurve> scaled = curves;
    for (auto& curve : scaled)
      for (double& v : curve.values) v *= c;
    for (long long B : {0ll, 7ll, 20ll, 48ll}) {
      CHECK(mckp_dp_allocate(scaled, 1, heads, B).budgets ==
            mckp_dp_allocate(curves, 1, heads, B).budgets);
      std::vector<MarginalGains> g0, g1;
      for (int h = 0; h < heads; ++h) {
        g0.push_back(marginal_gains(pava_convexify(curves[h])));
        g1.push_back(marginal_gains(pava_convexify(scaled[h])));
      }
      CHECK(greedy_allocate(g1, 1, heads, B).budgets ==
            greedy_allocate(g0, 1, heads, B).budgets);
    }
  }
}

TEST_CASE("uniform baseline") {
  const BudgetAllocation a = uniform_allocate(2, 2, 4, 8);
  CHECK(a.budgets == std::vector<int>{2, 2, 2, 2});
  CHECK(a.total_budget == 8);

  SUBCASE("remainder goes to the lexicographically first heads") {
    const BudgetAllocation b = uniform_allocate(1, 3, 4, 7);
    CHECK(b.budgets == std::vector<int>{3, 2, 2});
  }
  SUBCASE("infeasible") {
    CHECK_THROWS_AS(uniform_allocate(1, 2, 3, 7), InfeasibleError);
  }
}

TEST_CASE("pyramid baseline ramps down with depth") {
  for (long long B : {16ll, 40ll, 100ll}) {
    const BudgetAllocation a = pyramid_allocate(4, 2, 32, B, 20.0);
    long long total = 0;
    std::vector<long long> layer(4, 0);
    for (int l = 0; l < 4; ++l)
      for (int h = 0; h < 2; ++h) {
        layer[l] += a.at(l, h);
        total += a.at(l, h);
      }
    CHECK(total == B);
    for (int l = 1; l < 4; ++l) CHECK(layer[l] <= layer[l - 1]);
    // beta = 20 concentrates budget sharply in the first layer.
    CHECK(layer[0] > layer[3]);
  }
  SUBCASE("single layer degenerates to uniform") {
    const BudgetAllocation a = pyramid_allocate(1, 4, 8, 10, 20.0);
    CHECK(a.budgets == std::vector<int>{3, 3, 2, 2});
  }
}

TEST_CASE("adaptive top-k baseline") {
  ScoreMatrix scores;
  scores.num_layers = 2;
  scores.num_heads = 2;
  scores.positions = 4;

  SUBCASE("alpha=1 reduces to uniform within layers") {
    scores.values = {9.0, 1.0, 0.5, 0.1, 8.0, 2.0, 0.4, 0.2,
                     3.0, 3.0, 3.0, 3.0, 0.1, 0.1, 0.1, 0.1};
    const BudgetAllocation a = adaptive_topk_allocate(scores, 8, 1.0);
    CHECK(a.budgets == std::vector<int>{2, 2, 2, 2});
  }
  SUBCASE("top scores attract the remaining budget") {
    // Layer 0: head 0 holds all the big scores; alpha=0 gives it everything.
    scores.values = {9.0, 8.0, 7.0, 6.0, 0.4, 0.3, 0.2, 0.1,
                     5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0};
    const BudgetAllocation a = adaptive_topk_allocate(scores, 8, 0.0);
    CHECK(a.at(0, 0) == 4);
    CHECK(a.at(0, 1) == 0);
    CHECK(a.at(1, 0) + a.at(1, 1) == 4);
  }
  SUBCASE("budget conservation and bounds on random scores") {
    CheckRng rng(66);
    scores.values.resize(16);
    for (double& v : scores.values) v = rng.uniform();
    for (long long B = 0; B <= 16; ++B) {
      const BudgetAllocation a = adaptive_topk_allocate(scores, B, 0.2);
      long long total = 0;
      for (int b : a.budgets) {
        CHECK(b >= 0);
        CHECK(b <= 4);
        total += b;
      }
      CHECK(total == B);
    }
  }
}

TEST_CASE("every allocator conserves the budget exactly") {
  CheckRng rng(67);
  const int L = 2, H = 3, T = 10;
  std::vector<LossCurve> curves;
  std::vector<MarginalGains> gains;
  for (int i = 0; i < L * H; ++i) {
    curves.push_back(random_nonincreasing_curve(rng, T));
    gains.push_back(marginal_gains(pava_convexify(curves.back())));
  }
  ScoreMatrix scores;
  scores.num_layers = L;
  scores.num_heads = H;
  scores.positions = T;
  scores.values.resize(L * H * T);
  for (double& v : scores.values) v = rng.uniform();

  for (long long B : {0ll, 13ll, 37ll, 60ll}) {
    for (const BudgetAllocation& a :
         {greedy_allocate(gains, L, H, B), mckp_dp_allocate(curves, L, H, B),
          uniform_allocate(L, H, T, B), pyramid_allocate(L, H, T, B, 20.0),
          adaptive_topk_allocate(scores, B, 0.2)}) {
      long long total = 0;
      for (int b : a.budgets) {
        CHECK(b >= 0);
        CHECK(b <= T);
        total += b;
      }
      CHECK(total == B);
    }
  }
}

TEST_CASE("greedy equals DP on convexified curves") {
  CheckRng rng(68);
  for (int trial = 0; trial < 30; ++trial) {
    const int heads = 1 + static_cast<int>(rng.bits() % 8);
    const int T = 2 + static_cast<int>(rng.bits() % 30);
    std::vector<ConvexLossCurve> convex;
    std::vector<MarginalGains> gains;
    for (int h = 0; h < heads; ++h) {
      convex.push_back(pava_convexify(random_nonincreasing_curve(rng, T)));
      gains.push_back(marginal_gains(convex.back()));
    }
    const long long capacity = static_cast<long long>(heads) * T;
    for (double frac : {0.0, 0.3, 0.7, 1.0}) {
      const long long B = static_cast<long long>(frac * capacity);
      const double g = greedy_allocate(gains, 1, heads, B).objective;
      const double d = mckp_dp_allocate(convex, 1, heads, B).objective;
      CHECK(std::abs(g - d) <=
            1e-9 * std::max(1.0, std::abs(d)));
    }
  }
}

TEST_CASE("DP objective ties resolve to the smallest later-head budget") {
  // Identical heads: either head could take the single unit; the later head
  // must settle on the smaller budget.
  const std::vector<LossCurve> curves = {make_curve({1.0, 0.0}),
                                         make_curve({1.0, 0.0})};
  const BudgetAllocation a = mckp_dp_allocate(curves, 1, 2, 1);
  CHECK(a.budgets == std::vector<int>{1, 0});
}
