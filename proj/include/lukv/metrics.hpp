#pragma once

#include <string>
#include <vector>

#include "lukv/oracle.hpp"
#include "lukv/trace.hpp"

namespace lukv {

enum class MetricKind { snapkv, keydiff, oracle_passthrough };

const char* to_string(MetricKind k);
MetricKind metric_from_string(const std::string& name);

/// Heuristic scoring rule. window_size doubles as the recent-token safeguard
/// default for the metric (32 for snapkv, 1 for keydiff).
struct MetricSpec {
  MetricKind kind = MetricKind::snapkv;
  int window_size = 32;
  int kernel_size = 7;  // snapkv pooling kernel, odd

  static MetricSpec snapkv_default() { return {MetricKind::snapkv, 32, 7}; }
  static MetricSpec keydiff_default() { return {MetricKind::keydiff, 1, 1}; }
  static MetricSpec oracle_default() {
    return {MetricKind::oracle_passthrough, 1, 1};
  }
  static MetricSpec defaults_for(MetricKind kind);

  void validate(int prefill_len) const;  // throws ConfigError
};

/// One score per cached position per head.
struct ScoreMatrix {
  int num_layers = 0;
  int num_heads = 0;
  int positions = 0;
  std::vector<double> values;  // [L][H][T]

  double at(int l, int h, int j) const {
    return values[(static_cast<std::size_t>(l) * num_heads + h) * positions +
                  j];
  }
  double& at(int l, int h, int j) {
    return values[(static_cast<std::size_t>(l) * num_heads + h) * positions +
                  j];
  }
};

/// Mean attention over the trailing window rows, then a same-length 1-D
/// max-pool with edge-truncated windows.
ScoreMatrix snapkv_score(const TraceBundle& trace, const MetricSpec& spec);

/// Negative cosine between each key and the head's mean key; higher means
/// more anomalous and is retained first. Zero-norm keys score -1.
ScoreMatrix keydiff_score(const TraceBundle& trace, const MetricSpec& spec);

/// Descending stable sort with ascending-index tie-break (same rule as
/// oracle_ranking). NaN scores are rejected.
Ranking metric_ranking(const ScoreMatrix& scores);

/// Dispatch on spec.kind. oracle_passthrough scores are the raw oracle
/// importance values.
ScoreMatrix metric_scores(const TraceBundle& trace, const MetricSpec& spec);

}  // namespace lukv
