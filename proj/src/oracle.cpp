#include "lukv/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "tensor_io.hpp"

namespace lukv {

ImportanceTensor compute_oracle_importance(const TraceBundle& trace,
                                           bool normalize) {
  trace.validate();
  const ModelShape& s = trace.shape;
  const int L = s.num_layers, H = s.num_heads, T = s.prefill_len,
            K = s.decode_len;

  ImportanceTensor imp;
  imp.shape = s;
  imp.values.assign(s.head_count() * T, 0.0);

  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h)
      for (int j = 0; j < T; ++j) {
        const double v = trace.vnorm_at(l, h, j);
        double best = 0.0;
        for (int k = 0; k < K; ++k)
          best = std::max(best, trace.decode_at(l, h, k, j) * v);
        imp.at(l, h, j) = best;
      }

  if (normalize) {
    imp.normalization = Normalization::intra_layer;
    for (int l = 0; l < L; ++l) {
      double total = 0.0;
      for (int h = 0; h < H; ++h)
        for (int j = 0; j < T; ++j) total += imp.at(l, h, j);
      if (total > 0.0)
        for (int h = 0; h < H; ++h)
          for (int j = 0; j < T; ++j) imp.at(l, h, j) /= total;
    }
  }
  return imp;
}

Ranking oracle_ranking(const ImportanceTensor& importance) {
  const ModelShape& s = importance.shape;
  Ranking r;
  r.num_layers = s.num_layers;
  r.num_heads = s.num_heads;
  r.positions = s.prefill_len;
  r.order.resize(s.head_count() * s.prefill_len);

  for (int l = 0; l < s.num_layers; ++l)
    for (int h = 0; h < s.num_heads; ++h) {
      auto head = r.head({l, h});
      for (int j = 0; j < s.prefill_len; ++j) head[j] = j;
      // stable sort keeps ascending-position order among ties
      std::stable_sort(head.begin(), head.end(), [&](int a, int b) {
        return importance.at(l, h, a) > importance.at(l, h, b);
      });
    }
  return r;
}

std::filesystem::path export_importance(const ImportanceTensor& importance,
                                        const std::filesystem::path& dir) {
  const ModelShape& s = importance.shape;
  s.validate();
  std::filesystem::create_directories(dir);

  const auto manifest_path = dir / "manifest.json";
  TraceManifest manifest;
  if (std::filesystem::exists(manifest_path)) {
    manifest = read_manifest(manifest_path);
    if (!(manifest.shape == s))
      throw ValidationError(
          "oracle_importance: tensor shape does not match the trace manifest");
  } else {
    manifest.shape = s;
  }
  manifest.tensors["oracle_importance"] = TensorEntry{
      "oracle_importance.f32", {s.num_layers, s.num_heads, s.prefill_len}};

  const auto file_path = dir / "oracle_importance.f32";
  detail::write_f32le(file_path, importance.values);
  write_manifest(manifest, manifest_path);
  return file_path;
}

}  // namespace lukv
