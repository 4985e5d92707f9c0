#include <doctest.h>

#include <cmath>

#include "lukv/metrics.hpp"
#include "lukv/selfcheck.hpp"
#include "test_support.hpp"

using namespace lukv;

namespace {

/// Single-head trace with explicit prefill rows (and no decode content of
/// interest; decode_attn is filled with zeros of the right shape).
TraceBundle prefill_trace(std::vector<std::vector<double>> rows) {
  TraceBundle b;
  const int T = static_cast<int>(rows.front().size());
  b.shape = ModelShape{1, 1, T, 1, 0};
  b.decode_attn.assign(T, 0.0);
  b.vnorm.assign(T, 1.0);
  b.prefill_rows = static_cast<int>(rows.size());
  for (const auto& row : rows)
    b.prefill_attn.insert(b.prefill_attn.end(), row.begin(), row.end());
  return b;
}

TraceBundle key_trace(std::vector<std::vector<double>> keys) {
  TraceBundle b;
  const int T = static_cast<int>(keys.size());
  const int D = static_cast<int>(keys.front().size());
  b.shape = ModelShape{1, 1, T, 1, D};
  b.decode_attn.assign(T, 0.0);
  b.vnorm.assign(T, 1.0);
  for (const auto& k : keys) b.keys.insert(b.keys.end(), k.begin(), k.end());
  return b;
}

}  // namespace

TEST_CASE("snapkv pooling of a constant field is constant") {
  const double c = 0.125;
  const TraceBundle b = prefill_trace({{c, c, c, c}, {c, c, c, c}});
  const ScoreMatrix s = snapkv_score(b, MetricSpec{MetricKind::snapkv, 2, 3});
  for (int j = 0; j < 4; ++j) CHECK(s.at(0, 0, j) == doctest::Approx(c));
}

TEST_CASE("snapkv max-pool truncates at the edges") {
  // Window mean [0,1,0,0,0] with kernel 3 pools to [1,1,1,0,0].
  const TraceBundle b = prefill_trace({{0.0, 1.0, 0.0, 0.0, 0.0}});
  const ScoreMatrix s = snapkv_score(b, MetricSpec{MetricKind::snapkv, 1, 3});
  CHECK(s.at(0, 0, 0) == 1.0);
  CHECK(s.at(0, 0, 1) == 1.0);
  CHECK(s.at(0, 0, 2) == 1.0);
  CHECK(s.at(0, 0, 3) == 0.0);
  CHECK(s.at(0, 0, 4) == 0.0);
}

TEST_CASE("kernel 1 is identity pooling over the window mean") {
  const TraceBundle b =
      prefill_trace({{0.4, 0.1, 0.3, 0.2}, {0.2, 0.3, 0.1, 0.4}});
  const ScoreMatrix s = snapkv_score(b, MetricSpec{MetricKind::snapkv, 2, 1});
  CHECK(s.at(0, 0, 0) == doctest::Approx(0.3));
  CHECK(s.at(0, 0, 1) == doctest::Approx(0.2));
  CHECK(s.at(0, 0, 2) == doctest::Approx(0.2));
  CHECK(s.at(0, 0, 3) == doctest::Approx(0.3));
}

TEST_CASE("snapkv is monotone in pointwise-dominating inputs") {
  lukv::selfcheck::CheckRng rng(7);
  std::vector<std::vector<double>> rows(3, std::vector<double>(12));
  for (auto& row : rows)
    for (double& v : row) v = rng.uniform();
  const TraceBundle base = prefill_trace(rows);
  const MetricSpec spec{MetricKind::snapkv, 3, 5};
  const ScoreMatrix s0 = metric_scores(base, spec);

  rows[1][4] += 0.5;  // raise one attention entry
  const TraceBundle raised = prefill_trace(rows);
  const ScoreMatrix s1 = metric_scores(raised, spec);
  for (int j = 0; j < 12; ++j) CHECK(s1.at(0, 0, j) >= s0.at(0, 0, j));
}

TEST_CASE("snapkv requires prefill rows") {
  TraceBundle b;
  b.shape = ModelShape{1, 1, 4, 1, 0};
  b.decode_attn.assign(4, 0.0);
  b.vnorm.assign(4, 1.0);
  CHECK_THROWS_AS(snapkv_score(b, MetricSpec::snapkv_default()),
                  MetricUnavailableError);
}

TEST_CASE("keydiff scores anomalous keys first") {
  SUBCASE("identical keys all score -1") {
    const TraceBundle b = key_trace({{3.0, 1.0}, {3.0, 1.0}, {3.0, 1.0}});
    const ScoreMatrix s = keydiff_score(b, MetricSpec::keydiff_default());
    for (int j = 0; j < 3; ++j)
      CHECK(s.at(0, 0, j) == doctest::Approx(-1.0));
  }
  SUBCASE("hand-computed cosines") {
    // Keys {(1,0),(-1,0),(0,1)}; mean (0,1/3); scores are -cos = [0,0,-1].
    const TraceBundle b = key_trace({{1.0, 0.0}, {-1.0, 0.0}, {0.0, 1.0}});
    const ScoreMatrix s = keydiff_score(b, MetricSpec::keydiff_default());
    CHECK(s.at(0, 0, 0) == doctest::Approx(0.0));
    CHECK(s.at(0, 0, 1) == doctest::Approx(0.0));
    CHECK(s.at(0, 0, 2) == doctest::Approx(-1.0));
    const Ranking r = metric_ranking(s);
    CHECK(r.order == std::vector<int>{0, 1, 2});
  }
  SUBCASE("duplicating every key leaves scores unchanged") {
    const std::vector<std::vector<double>> keys = {
        {1.0, 2.0}, {-1.0, 0.5}, {0.25, -2.0}};
    std::vector<std::vector<double>> doubled = keys;
    doubled.insert(doubled.end(), keys.begin(), keys.end());
    const ScoreMatrix s0 =
        keydiff_score(key_trace(keys), MetricSpec::keydiff_default());
    const ScoreMatrix s1 =
        keydiff_score(key_trace(doubled), MetricSpec::keydiff_default());
    for (int j = 0; j < 3; ++j) {
      CHECK(s1.at(0, 0, j) == doctest::Approx(s0.at(0, 0, j)));
      CHECK(s1.at(0, 0, j + 3) == doctest::Approx(s0.at(0, 0, j)));
    }
  }
  SUBCASE("zero-norm keys rank last by convention") {
    const TraceBundle b = key_trace({{0.0, 0.0}, {1.0, 1.0}});
    const ScoreMatrix s = keydiff_score(b, MetricSpec::keydiff_default());
    CHECK(s.at(0, 0, 0) == -1.0);
  }
  SUBCASE("missing keys tensor") {
    TraceBundle b;
    b.shape = ModelShape{1, 1, 2, 1, 0};
    b.decode_attn.assign(2, 0.0);
    b.vnorm.assign(2, 1.0);
    CHECK_THROWS_AS(keydiff_score(b, MetricSpec::keydiff_default()),
                    MetricUnavailableError);
  }
}

TEST_CASE("metric ranking rules") {
  ScoreMatrix s;
  s.num_layers = 1;
  s.num_heads = 1;

  SUBCASE("ties break by ascending position") {
    s.positions = 3;
    s.values = {0.3, 0.3, 0.3};
    CHECK(metric_ranking(s).order == std::vector<int>{0, 1, 2});
  }
  SUBCASE("descending scores") {
    s.positions = 3;
    s.values = {1.0, 3.0, 2.0};
    CHECK(metric_ranking(s).order == std::vector<int>{1, 2, 0});
  }
  SUBCASE("NaN scores are invalid") {
    s.positions = 2;
    s.values = {0.5, std::nan("")};
    CHECK_THROWS_AS(metric_ranking(s), ValidationError);
  }
  SUBCASE("adding a constant does not change the ranking") {
    lukv::selfcheck::CheckRng rng(21);
    s.positions = 17;
    s.values.resize(17);
    for (double& v : s.values) v = rng.normal();
    const Ranking before = metric_ranking(s);
    for (double& v : s.values) v += 3.25;
    CHECK(metric_ranking(s).order == before.order);
  }
  SUBCASE("random top-k set matches brute-force selection") {
    lukv::selfcheck::CheckRng rng(22);
    s.positions = 23;
    s.values.resize(23);
    for (double& v : s.values) v = rng.normal();
    const Ranking rank = metric_ranking(s);
    for (int k : {0, 1, 5, 23}) {
      std::vector<char> picked(23, 0);
      std::vector<double> rest = s.values;
      for (int i = 0; i < k; ++i) {  // brute-force k-largest
        int best = -1;
        for (int j = 0; j < 23; ++j)
          if (!picked[j] && (best < 0 || rest[j] > rest[best])) best = j;
        picked[best] = 1;
      }
      for (int i = 0; i < k; ++i) CHECK(picked[rank.order[i]] == 1);
    }
  }
}

TEST_CASE("oracle passthrough ranks exactly like the oracle") {
  const ModelShape shape{1, 2, 20, 3, 4};
  const TraceBundle b = generate_synthetic_trace(shape, 17, Scenario::mixed);
  const ImportanceTensor imp = compute_oracle_importance(b, false);
  const Ranking via_metric =
      metric_ranking(metric_scores(b, MetricSpec::oracle_default()));
  CHECK(via_metric.order == oracle_ranking(imp).order);
}
