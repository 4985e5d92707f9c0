#include "lukv/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace lukv {

const char* to_string(MetricKind k) {
  switch (k) {
    case MetricKind::snapkv:
      return "snapkv";
    case MetricKind::keydiff:
      return "keydiff";
    case MetricKind::oracle_passthrough:
      return "oracle";
  }
  return "?";
}

MetricKind metric_from_string(const std::string& name) {
  if (name == "snapkv") return MetricKind::snapkv;
  if (name == "keydiff") return MetricKind::keydiff;
  if (name == "oracle" || name == "oracle_passthrough")
    return MetricKind::oracle_passthrough;
  throw ConfigError("unknown metric: " + name);
}

MetricSpec MetricSpec::defaults_for(MetricKind kind) {
  switch (kind) {
    case MetricKind::snapkv:
      return snapkv_default();
    case MetricKind::keydiff:
      return keydiff_default();
    case MetricKind::oracle_passthrough:
      return oracle_default();
  }
  return snapkv_default();
}

void MetricSpec::validate(int prefill_len) const {
  if (window_size < 1) throw ConfigError("window_size must be >= 1");
  if (window_size > prefill_len)
    throw ConfigError("window_size exceeds prefill length");
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw ConfigError("kernel_size must be odd and >= 1");
}

ScoreMatrix snapkv_score(const TraceBundle& trace, const MetricSpec& spec) {
  if (!trace.has_prefill())
    throw MetricUnavailableError("snapkv: trace has no prefill_attn tensor");
  spec.validate(trace.shape.prefill_len);
  if (trace.prefill_rows < spec.window_size)
    throw MetricUnavailableError(
        "snapkv: trace has fewer prefill rows than the observation window");

  const ModelShape& s = trace.shape;
  const int T = s.prefill_len;
  const int w0 = trace.prefill_rows - spec.window_size;
  const int r = spec.kernel_size / 2;

  ScoreMatrix out;
  out.num_layers = s.num_layers;
  out.num_heads = s.num_heads;
  out.positions = T;
  out.values.resize(s.head_count() * T);

  std::vector<double> mean(T);
  for (int l = 0; l < s.num_layers; ++l)
    for (int h = 0; h < s.num_heads; ++h) {
      for (int j = 0; j < T; ++j) {
        double acc = 0.0;
        for (int w = w0; w < trace.prefill_rows; ++w)
          acc += trace.prefill_at(l, h, w, j);
        mean[j] = acc / spec.window_size;
      }
      for (int j = 0; j < T; ++j) {
        const int lo = std::max(0, j - r);
        const int hi = std::min(T - 1, j + r);
        double best = mean[lo];
        for (int t = lo + 1; t <= hi; ++t) best = std::max(best, mean[t]);
        out.at(l, h, j) = best;
      }
    }
  return out;
}

ScoreMatrix keydiff_score(const TraceBundle& trace, const MetricSpec& spec) {
  (void)spec;
  if (!trace.has_keys())
    throw MetricUnavailableError("keydiff: trace has no keys tensor");

  const ModelShape& s = trace.shape;
  const int T = s.prefill_len, D = s.head_dim;

  ScoreMatrix out;
  out.num_layers = s.num_layers;
  out.num_heads = s.num_heads;
  out.positions = T;
  out.values.resize(s.head_count() * T);

  std::vector<double> mean(D);
  for (int l = 0; l < s.num_layers; ++l)
    for (int h = 0; h < s.num_heads; ++h) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (int j = 0; j < T; ++j)
        for (int d = 0; d < D; ++d) mean[d] += trace.key_at(l, h, j, d);
      double mean_norm2 = 0.0;
      for (int d = 0; d < D; ++d) {
        mean[d] /= T;
        mean_norm2 += mean[d] * mean[d];
      }
      const double mean_norm = std::sqrt(mean_norm2);

      for (int j = 0; j < T; ++j) {
        double dot = 0.0, key_norm2 = 0.0;
        for (int d = 0; d < D; ++d) {
          const double kv = trace.key_at(l, h, j, d);
          dot += kv * mean[d];
          key_norm2 += kv * kv;
        }
        const double key_norm = std::sqrt(key_norm2);
        if (key_norm == 0.0) {
          out.at(l, h, j) = -1.0;  // convention: zero keys rank last
        } else if (mean_norm == 0.0) {
          out.at(l, h, j) = 0.0;
        } else {
          out.at(l, h, j) = -(dot / (key_norm * mean_norm));
        }
      }
    }
  return out;
}

Ranking metric_ranking(const ScoreMatrix& scores) {
  for (std::size_t i = 0; i < scores.values.size(); ++i)
    if (std::isnan(scores.values[i]))
      throw ValidationError("invalid score: NaN at flat index " +
                            std::to_string(i));

  Ranking r;
  r.num_layers = scores.num_layers;
  r.num_heads = scores.num_heads;
  r.positions = scores.positions;
  r.order.resize(scores.values.size());

  for (int l = 0; l < scores.num_layers; ++l)
    for (int h = 0; h < scores.num_heads; ++h) {
      auto head = r.head({l, h});
      for (int j = 0; j < scores.positions; ++j) head[j] = j;
      std::stable_sort(head.begin(), head.end(), [&](int a, int b) {
        return scores.at(l, h, a) > scores.at(l, h, b);
      });
    }
  return r;
}

ScoreMatrix metric_scores(const TraceBundle& trace, const MetricSpec& spec) {
  switch (spec.kind) {
    case MetricKind::snapkv:
      return snapkv_score(trace, spec);
    case MetricKind::keydiff:
      return keydiff_score(trace, spec);
    case MetricKind::oracle_passthrough: {
      ImportanceTensor imp = compute_oracle_importance(trace, false);
      ScoreMatrix out;
      out.num_layers = imp.shape.num_layers;
      out.num_heads = imp.shape.num_heads;
      out.positions = imp.shape.prefill_len;
      out.values = std::move(imp.values);
      return out;
    }
  }
  throw ConfigError("unknown metric kind");
}

}  // namespace lukv
