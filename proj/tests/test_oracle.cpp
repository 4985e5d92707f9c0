#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lukv/oracle.hpp"
#include "lukv/selfcheck.hpp"
#include "test_support.hpp"

using namespace lukv;
using lukv::selfcheck::CheckRng;

namespace {

TraceBundle single_head_trace(std::vector<std::vector<double>> attn_rows,
                              std::vector<double> vnorm) {
  TraceBundle b;
  const int T = static_cast<int>(vnorm.size());
  b.shape = ModelShape{1, 1, T, static_cast<int>(attn_rows.size()), 0};
  for (const auto& row : attn_rows)
    b.decode_attn.insert(b.decode_attn.end(), row.begin(), row.end());
  b.vnorm = std::move(vnorm);
  return b;
}

}  // namespace

TEST_CASE("importance is the max contribution over decode steps") {
  SUBCASE("single step") {
    const TraceBundle b = single_head_trace({{0.5}}, {2.0});
    const ImportanceTensor imp = compute_oracle_importance(b, false);
    CHECK(imp.at(0, 0, 0) == 1.0);
  }
  SUBCASE("zero vnorm kills importance") {
    const TraceBundle b =
        single_head_trace({{0.2, 0.3}, {0.4, 0.1}}, {0.0, 0.0});
    const ImportanceTensor imp = compute_oracle_importance(b, false);
    CHECK(imp.at(0, 0, 0) == 0.0);
    CHECK(imp.at(0, 0, 1) == 0.0);
  }
  SUBCASE("max over three steps") {
    // Brute-force oracle: enumerate A[k]*v for every k.
    const std::vector<double> a = {0.1, 0.4, 0.2};
    const double v = 3.0;
    double expected = 0.0;
    for (double ak : a) expected = std::max(expected, ak * v);
    CHECK(expected == doctest::Approx(1.2).epsilon(1e-15));

    const TraceBundle b = single_head_trace({{0.1}, {0.4}, {0.2}}, {3.0});
    const ImportanceTensor imp = compute_oracle_importance(b, false);
    CHECK(imp.at(0, 0, 0) == expected);
  }
}

TEST_CASE("max dominance over every single-step contribution") {
  const ModelShape shape{2, 2, 24, 5, 0};
  const TraceBundle b = generate_synthetic_trace(shape, 31, Scenario::mixed);
  const ImportanceTensor imp = compute_oracle_importance(b, false);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h)
      for (int j = 0; j < 24; ++j)
        for (int k = 0; k < 5; ++k)
          CHECK(imp.at(l, h, j) >=
                b.decode_at(l, h, k, j) * b.vnorm_at(l, h, j));
}

TEST_CASE("scaling one head's vnorm scales its importance linearly") {
  const ModelShape shape{1, 2, 16, 3, 0};
  TraceBundle a = generate_synthetic_trace(shape, 5, Scenario::aligned);
  TraceBundle scaled = a;
  const double c = 4.0;  // power of two keeps the scaling exact
  for (int j = 0; j < 16; ++j)
    scaled.vnorm[static_cast<std::size_t>(0) * 16 + j] *= c;

  const ImportanceTensor ia = compute_oracle_importance(a, false);
  const ImportanceTensor ib = compute_oracle_importance(scaled, false);
  for (int j = 0; j < 16; ++j) {
    CHECK(ib.at(0, 0, j) == c * ia.at(0, 0, j));
    CHECK(ib.at(0, 1, j) == ia.at(0, 1, j));
  }
  const Ranking ra = oracle_ranking(ia);
  const Ranking rb = oracle_ranking(ib);
  CHECK(ra.order == rb.order);
}

TEST_CASE("intra-layer normalization sums each layer to one") {
  const ModelShape shape{3, 2, 20, 4, 0};
  const TraceBundle b = generate_synthetic_trace(shape, 13, Scenario::mixed);
  const ImportanceTensor raw = compute_oracle_importance(b, false);
  const ImportanceTensor norm = compute_oracle_importance(b, true);
  CHECK(norm.normalization == Normalization::intra_layer);

  for (int l = 0; l < 3; ++l) {
    double total = 0.0;
    for (int h = 0; h < 2; ++h)
      for (int j = 0; j < 20; ++j) total += norm.at(l, h, j);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Rankings are unchanged by the per-layer rescale.
  CHECK(oracle_ranking(raw).order == oracle_ranking(norm).order);
}

TEST_CASE("zero-mass layers stay zero under normalization") {
  TraceBundle b;
  b.shape = ModelShape{1, 1, 3, 1, 0};
  b.decode_attn = {0.1, 0.2, 0.3};
  b.vnorm = {0.0, 0.0, 0.0};
  const ImportanceTensor norm = compute_oracle_importance(b, true);
  CHECK(norm.normalization == Normalization::intra_layer);
  for (int j = 0; j < 3; ++j) CHECK(norm.at(0, 0, j) == 0.0);
}

TEST_CASE("oracle ranking sorts descending with position tie-break") {
  SUBCASE("all ties fall back to position order") {
    const auto imp = lukv::testing::make_importance({0.0, 0.0, 0.0});
    CHECK(oracle_ranking(imp).order == std::vector<int>{0, 1, 2});
  }
  SUBCASE("stable descending sort") {
    const auto imp = lukv::testing::make_importance({2.0, 5.0, 5.0, 1.0});
    CHECK(oracle_ranking(imp).order == std::vector<int>{1, 2, 0, 3});
  }
  SUBCASE("top-k prefix equals the brute-force k-largest set") {
    CheckRng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
      const int T = 1 + static_cast<int>(rng.bits() % 40);
      std::vector<double> values(T);
      for (double& v : values) v = rng.normal();
      const auto imp = lukv::testing::make_importance(values);
      const Ranking rank = oracle_ranking(imp);
      const int k = static_cast<int>(rng.bits() % (T + 1));

      // Brute-force selection: repeatedly take the largest remaining value.
      std::vector<int> expect(T);
      for (int i = 0; i < T; ++i) expect[i] = i;
      std::stable_sort(expect.begin(), expect.end(),
                       [&](int a, int b) { return values[a] > values[b]; });
      std::vector<int> lhs(rank.order.begin(), rank.order.begin() + k);
      std::vector<int> rhs(expect.begin(), expect.begin() + k);
      std::sort(lhs.begin(), lhs.end());
      std::sort(rhs.begin(), rhs.end());
      CHECK(lhs == rhs);
    }
  }
}

TEST_CASE("importance tensors export into the trace directory format") {
  lukv::testing::TempDir dir("oracle_export");
  const ModelShape shape{2, 2, 12, 3, 4};
  const TraceBundle b = generate_synthetic_trace(shape, 9, Scenario::mixed);
  save_trace(b, dir.path() / "t");

  const ImportanceTensor imp = compute_oracle_importance(b, true);
  const auto file = export_importance(imp, dir.path() / "t");
  CHECK(std::filesystem::file_size(file) == 2 * 2 * 12 * 4);

  const TraceManifest m = read_manifest(dir.path() / "t" / "manifest.json");
  REQUIRE(m.tensors.count("oracle_importance") == 1);
  CHECK(m.tensors.at("oracle_importance").dims == std::vector<int>{2, 2, 12});
  CHECK(m.tensors.at("oracle_importance").dtype == "f32le");

  // The augmented directory still loads as a trace.
  const TraceBundle again = load_trace(dir.path() / "t");
  CHECK(again == b);
}
