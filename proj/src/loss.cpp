#include "lukv/loss.hpp"

#include <algorithm>
#include <cmath>

#include "lukv/util.hpp"

namespace lukv {

namespace {

void check_head(const ImportanceTensor& imp, HeadIndex head) {
  if (head.layer < 0 || head.layer >= imp.shape.num_layers || head.head < 0 ||
      head.head >= imp.shape.num_heads)
    throw ValidationError("head index out of range");
}

void check_ranking(const ImportanceTensor& imp, const Ranking& ranking) {
  if (ranking.num_layers != imp.shape.num_layers ||
      ranking.num_heads != imp.shape.num_heads ||
      ranking.positions != imp.shape.prefill_len)
    throw ValidationError("ranking shape does not match importance tensor");
}

}  // namespace

double eviction_loss(const ImportanceTensor& importance, HeadIndex head,
                     std::span<const int> retained) {
  check_head(importance, head);
  const int T = importance.shape.prefill_len;
  std::vector<char> keep(T, 0);
  for (int j : retained) {
    if (j < 0 || j >= T)
      throw ValidationError("retained position " + std::to_string(j) +
                            " out of range");
    keep[j] = 1;
  }
  double loss = 0.0;
  for (int j = 0; j < T; ++j)
    if (!keep[j]) loss += importance.at(head.layer, head.head, j);
  return loss;
}

LossCurve loss_curve(const ImportanceTensor& importance, HeadIndex head,
                     const Ranking& ranking) {
  check_head(importance, head);
  check_ranking(importance, ranking);
  const int T = importance.shape.prefill_len;
  const auto order = ranking.head(head);

  LossCurve curve;
  curve.head = head;
  curve.values.assign(T + 1, 0.0);
  // Backward accumulation keeps values[i-1] - values[i] equal to the
  // importance of the i-th ranked token.
  for (int i = T - 1; i >= 0; --i)
    curve.values[i] =
        curve.values[i + 1] + importance.at(head.layer, head.head, order[i]);
  return curve;
}

std::vector<LossCurve> all_loss_curves(const ImportanceTensor& importance,
                                       const Ranking& ranking) {
  std::vector<LossCurve> curves;
  curves.reserve(importance.shape.head_count());
  for (int l = 0; l < importance.shape.num_layers; ++l)
    for (int h = 0; h < importance.shape.num_heads; ++h)
      curves.push_back(loss_curve(importance, {l, h}, ranking));
  return curves;
}

std::pair<SetDecomposition, GapDecomposition> decompose(
    const ImportanceTensor& importance, HeadIndex head,
    const Ranking& oracle_rank, const Ranking& metric_rank, int budget) {
  check_head(importance, head);
  check_ranking(importance, oracle_rank);
  check_ranking(importance, metric_rank);
  const int T = importance.shape.prefill_len;
  if (budget < 0 || budget > T)
    throw ValidationError("budget out of range 0..T");

  const auto o = oracle_rank.head(head);
  const auto m = metric_rank.head(head);
  std::vector<char> in_oracle(T, 0), in_metric(T, 0);
  for (int i = 0; i < budget; ++i) {
    in_oracle[o[i]] = 1;
    in_metric[m[i]] = 1;
  }

  SetDecomposition sets;
  sets.budget = budget;
  double miss_mass = 0.0, fp_mass = 0.0;
  double heuristic = 0.0, oracle_loss = 0.0;
  for (int j = 0; j < T; ++j) {
    const double v = importance.at(head.layer, head.head, j);
    if (in_oracle[j] && in_metric[j]) {
      sets.hits.push_back(j);
    } else if (in_oracle[j]) {
      sets.misses.push_back(j);
      miss_mass += v;
    } else if (in_metric[j]) {
      sets.false_positives.push_back(j);
      fp_mass += v;
    }
    if (!in_metric[j]) heuristic += v;
    if (!in_oracle[j]) oracle_loss += v;
  }

  GapDecomposition gap;
  gap.heuristic_loss = heuristic;
  gap.oracle_loss = oracle_loss;
  gap.optimality_gap = miss_mass - fp_mass;
  return {std::move(sets), gap};
}

std::vector<double> recall_curve(const ImportanceTensor& importance,
                                 HeadIndex head, const Ranking& ranking,
                                 std::span<const double> ratios) {
  check_head(importance, head);
  check_ranking(importance, ranking);
  const int T = importance.shape.prefill_len;
  const auto order = ranking.head(head);

  std::vector<int> rank_of(T);
  for (int i = 0; i < T; ++i) rank_of[order[i]] = i;
  double total = 0.0;
  for (int j = 0; j < T; ++j) total += importance.at(head.layer, head.head, j);

  std::vector<double> out;
  out.reserve(ratios.size());
  for (double sigma : ratios) {
    if (sigma < 0.0 || sigma > 1.0)
      throw ConfigError("compression ratio outside [0,1]");
    if (total <= 0.0) {
      out.push_back(1.0);  // nothing to lose
      continue;
    }
    const long long b = budget_floor((1.0 - sigma) * T);
    // Summing in position order makes the result a function of the retained
    // set alone, so rankings sharing a prefix set recall identically.
    double mass = 0.0;
    for (int j = 0; j < T; ++j)
      if (rank_of[j] < b) mass += importance.at(head.layer, head.head, j);
    out.push_back(std::clamp(mass / total, 0.0, 1.0));
  }
  return out;
}

std::vector<std::pair<int, double>> second_difference_witness(
    const ImportanceTensor& importance, HeadIndex head,
    const Ranking& ranking) {
  const LossCurve curve = loss_curve(importance, head, ranking);
  const int T = curve.positions();
  std::vector<std::pair<int, double>> witnesses;
  for (int i = 1; i <= T - 1; ++i) {
    const double v =
        curve.values[i + 1] - 2.0 * curve.values[i] + curve.values[i - 1];
    if (v < 0.0) witnesses.emplace_back(i, v);
  }
  return witnesses;
}

}  // namespace lukv
