#pragma once

#include <span>
#include <vector>

#include "lukv/trace.hpp"

namespace lukv {

enum class Normalization { raw, intra_layer };

/// Oracle importance I[l,h,j]: the maximum potential contribution of cached
/// position j over the traced decode window.
struct ImportanceTensor {
  ModelShape shape;
  std::vector<double> values;  // [L][H][T]
  Normalization normalization = Normalization::raw;

  double at(int l, int h, int j) const {
    return values[(static_cast<std::size_t>(l) * shape.num_heads + h) *
                      shape.prefill_len +
                  j];
  }
  double& at(int l, int h, int j) {
    return values[(static_cast<std::size_t>(l) * shape.num_heads + h) *
                      shape.prefill_len +
                  j];
  }
  std::span<const double> head(HeadIndex hd) const {
    return {values.data() + (static_cast<std::size_t>(hd.layer) *
                                 shape.num_heads +
                             hd.head) *
                                shape.prefill_len,
            static_cast<std::size_t>(shape.prefill_len)};
  }
};

/// Per-head permutations of 0..T-1, best-ranked position first. The length-k
/// prefix of a head's list is that head's retained set at budget k.
struct Ranking {
  int num_layers = 0;
  int num_heads = 0;
  int positions = 0;           // T
  std::vector<int> order;      // [L][H][T]

  std::span<const int> head(HeadIndex hd) const {
    return {order.data() +
                (static_cast<std::size_t>(hd.layer) * num_heads + hd.head) *
                    positions,
            static_cast<std::size_t>(positions)};
  }
  std::span<int> head(HeadIndex hd) {
    return {order.data() +
                (static_cast<std::size_t>(hd.layer) * num_heads + hd.head) *
                    positions,
            static_cast<std::size_t>(positions)};
  }
};

/// I[l,h,j] = max over decode steps k of decode_attn[l,h,k,j] * vnorm[l,h,j].
/// With `normalize`, each layer is divided by its total raw mass (zero-mass
/// layers stay all-zero) and the tensor is tagged intra_layer.
ImportanceTensor compute_oracle_importance(const TraceBundle& trace,
                                           bool normalize);

/// Descending sort per head; ties broken by ascending position index.
Ranking oracle_ranking(const ImportanceTensor& importance);

/// Writes the tensor into a trace directory as `oracle_importance`
/// (f32 little-endian, dims [L,H,T]) and registers it in the manifest,
/// creating a minimal manifest when the directory has none. Returns the
/// tensor file path.
std::filesystem::path export_importance(const ImportanceTensor& importance,
                                        const std::filesystem::path& dir);

}  // namespace lukv
