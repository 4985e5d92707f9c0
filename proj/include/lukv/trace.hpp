#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lukv/errors.hpp"

namespace lukv {

/// Attention rows are softmax mass; permit this much slack above 1.
inline constexpr double kRowSumSlack = 1e-6;

/// Dimensions of one traced model run.
struct ModelShape {
  int num_layers = 0;   // L
  int num_heads = 0;    // H per layer
  int prefill_len = 0;  // T
  int decode_len = 0;   // K_max
  int head_dim = 0;     // d_h; 0 when no key vectors are stored

  void validate() const;  // throws ConfigError
  std::size_t head_count() const {
    return static_cast<std::size_t>(num_layers) * num_heads;
  }

  bool operator==(const ModelShape&) const = default;
};

struct HeadIndex {
  int layer = 0;
  int head = 0;

  bool operator==(const HeadIndex&) const = default;
};

enum class Scenario { aligned, misaligned, mixed };

const char* to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

/// Attention weights, projected-value norms and optional key vectors for one
/// prefill plus K_max decode steps. All tensors are row-major doubles; values
/// are exactly representable as f32 so that disk round trips are lossless.
struct TraceBundle {
  ModelShape shape;
  std::vector<double> decode_attn;  // [L][H][K_max][T]
  std::vector<double> vnorm;        // [L][H][T]
  int prefill_rows = 0;             // W; 0 when prefill_attn is absent
  std::vector<double> prefill_attn;  // [L][H][W][T]
  std::vector<double> keys;          // [L][H][T][d_h]
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> meta;

  bool has_prefill() const { return prefill_rows > 0; }
  bool has_keys() const { return !keys.empty(); }

  double decode_at(int l, int h, int k, int j) const {
    const auto& s = shape;
    return decode_attn[((static_cast<std::size_t>(l) * s.num_heads + h) *
                            s.decode_len +
                        k) *
                           s.prefill_len +
                       j];
  }
  double vnorm_at(int l, int h, int j) const {
    const auto& s = shape;
    return vnorm[(static_cast<std::size_t>(l) * s.num_heads + h) *
                     s.prefill_len +
                 j];
  }
  double prefill_at(int l, int h, int w, int j) const {
    const auto& s = shape;
    return prefill_attn[((static_cast<std::size_t>(l) * s.num_heads + h) *
                             prefill_rows +
                         w) *
                            s.prefill_len +
                        j];
  }
  double key_at(int l, int h, int j, int d) const {
    const auto& s = shape;
    return keys[((static_cast<std::size_t>(l) * s.num_heads + h) *
                     s.prefill_len +
                 j) *
                    s.head_dim +
                d];
  }

  /// Checks nonnegativity, NaN-freeness and per-row attention mass <= 1+slack.
  void validate() const;  // throws ValidationError

  bool operator==(const TraceBundle&) const = default;
};

struct TensorEntry {
  std::string file;
  std::vector<int> dims;
  std::string dtype = "f32le";

  bool operator==(const TensorEntry&) const = default;
};

/// On-disk description of a trace directory.
struct TraceManifest {
  int schema_version = 1;
  ModelShape shape;
  std::map<std::string, TensorEntry> tensors;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> meta;

  bool operator==(const TraceManifest&) const = default;
};

/// Deterministic synthetic trace. `aligned` heads expose their decode-time
/// preferences in the prefill observation window; `misaligned` plants tokens
/// with high decode attention but low window attention in a fixed >=25%
/// subset of heads; `mixed` interleaves both head populations.
TraceBundle generate_synthetic_trace(const ModelShape& shape,
                                     std::uint64_t seed, Scenario scenario);

/// Writes manifest.json plus one raw f32 little-endian file per tensor.
/// Returns the manifest path. Re-saving a loaded bundle reproduces
/// byte-identical files.
std::filesystem::path save_trace(const TraceBundle& bundle,
                                 const std::filesystem::path& dir);

TraceBundle load_trace(const std::filesystem::path& dir);

TraceManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const TraceManifest& manifest,
                    const std::filesystem::path& path);

}  // namespace lukv
