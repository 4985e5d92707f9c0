#include "lukv/trace.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "lukv/util.hpp"
#include "tensor_io.hpp"

namespace lukv {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::size_t kMaxTensorElems = std::size_t{1} << 33;

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic per-head generator: mt19937_64 stream plus hand-rolled
/// transforms, so results are identical across platforms and runs.
class HeadRng {
 public:
  explicit HeadRng(std::uint64_t s) : eng_(s) {}

  double uniform() {  // [0, 1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double lognormal(double mu, double sigma) {
    return std::exp(mu + sigma * normal());
  }

  int below(int n) {  // uniform in [0, n)
    return std::min(n - 1, static_cast<int>(uniform() * n));
  }

  /// First `count` entries of a seeded permutation of 0..n-1.
  std::vector<int> sample(int n, int count) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < count; ++i) {
      int j = i + below(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t head_seed(std::uint64_t seed, int scenario_id, int l, int h) {
  std::uint64_t s = mix64(seed ^ 0x1c4f00dULL);
  s = mix64(s ^ (static_cast<std::uint64_t>(scenario_id) + 1));
  s = mix64(s ^ (static_cast<std::uint64_t>(l) * 0x9e3779b97f4a7c15ULL));
  s = mix64(s ^ (static_cast<std::uint64_t>(h) * 0xc2b2ae3d27d4eb4fULL));
  return s;
}

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

enum class HeadArchetype { narrow_aligned, broad_aligned, misaligned_planted };

HeadArchetype archetype_for(Scenario sc, int flat_head) {
  switch (sc) {
    case Scenario::aligned:
      return (flat_head % 2 == 0) ? HeadArchetype::narrow_aligned
                                  : HeadArchetype::broad_aligned;
    case Scenario::misaligned:
      switch (flat_head % 5) {
        case 0:
        case 3:
          return HeadArchetype::misaligned_planted;
        case 1:
          return HeadArchetype::narrow_aligned;
        default:
          return HeadArchetype::broad_aligned;
      }
    case Scenario::mixed:
      if (flat_head % 2 == 1) return HeadArchetype::misaligned_planted;
      return (flat_head % 4 == 0) ? HeadArchetype::narrow_aligned
                                  : HeadArchetype::broad_aligned;
  }
  return HeadArchetype::broad_aligned;
}

/// Softmax of `logits` over logits.size() + extra synthetic slots whose
/// logits are provided in `extra`; returns only the first logits.size()
/// entries. Mass leaking to the extra slots keeps row sums below 1.
std::vector<double> softmax_keep_prefix(const std::vector<double>& logits,
                                        const std::vector<double>& extra) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  for (double v : extra) m = std::max(m, v);
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - m);
  for (double v : extra) denom += std::exp(v - m);
  std::vector<double> out(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j)
    out[j] = std::exp(logits[j] - m) / denom;
  return out;
}

void index_error(const std::string& tensor, std::initializer_list<int> idx,
                 const std::string& what) {
  std::ostringstream os;
  os << tensor << "[";
  bool first = true;
  for (int v : idx) {
    if (!first) os << ",";
    os << v;
    first = false;
  }
  os << "]: " << what;
  throw ValidationError(os.str());
}

}  // namespace

void ModelShape::validate() const {
  if (num_layers < 1 || num_heads < 1 || prefill_len < 1 || decode_len < 1)
    throw ConfigError("invalid shape: L, H, T, K_max must all be >= 1");
  if (head_dim < 0) throw ConfigError("invalid shape: d_h must be >= 0");
  const std::size_t lht = head_count() * prefill_len;
  if (lht > kMaxTensorElems ||
      lht * static_cast<std::size_t>(decode_len) > kMaxTensorElems ||
      lht * static_cast<std::size_t>(std::max(head_dim, 1)) > kMaxTensorElems)
    throw ConfigError("invalid shape: tensor would exceed addressable size");
}

const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::aligned:
      return "aligned";
    case Scenario::misaligned:
      return "misaligned";
    case Scenario::mixed:
      return "mixed";
  }
  return "?";
}

Scenario scenario_from_string(const std::string& name) {
  if (name == "aligned") return Scenario::aligned;
  if (name == "misaligned") return Scenario::misaligned;
  if (name == "mixed") return Scenario::mixed;
  throw ConfigError("unknown scenario: " + name);
}

void TraceBundle::validate() const {
  shape.validate();
  const int L = shape.num_layers, H = shape.num_heads, T = shape.prefill_len,
            K = shape.decode_len;
  if (decode_attn.size() != shape.head_count() * K * T)
    throw ValidationError("decode_attn: size does not match shape");
  if (vnorm.size() != shape.head_count() * T)
    throw ValidationError("vnorm: size does not match shape");
  if (has_prefill() &&
      prefill_attn.size() != shape.head_count() * prefill_rows * T)
    throw ValidationError("prefill_attn: size does not match shape");
  if (!has_prefill() && !prefill_attn.empty())
    throw ValidationError("prefill_attn: data present but prefill_rows is 0");
  if (has_keys() && shape.head_dim < 1)
    throw ValidationError("keys: data present but d_h is 0");
  if (has_keys() && keys.size() != shape.head_count() * T * shape.head_dim)
    throw ValidationError("keys: size does not match shape");

  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      for (int k = 0; k < K; ++k) {
        double row = 0.0;
        for (int j = 0; j < T; ++j) {
          double v = decode_at(l, h, k, j);
          if (std::isnan(v)) index_error("decode_attn", {l, h, k, j}, "NaN");
          if (v < 0.0)
            index_error("decode_attn", {l, h, k, j}, "negative value");
          row += v;
        }
        if (row > 1.0 + kRowSumSlack)
          index_error("decode_attn", {l, h, k},
                      "row sum " + format_real(row) + " exceeds 1");
      }
      for (int j = 0; j < T; ++j) {
        double v = vnorm_at(l, h, j);
        if (std::isnan(v)) index_error("vnorm", {l, h, j}, "NaN");
        if (v < 0.0) index_error("vnorm", {l, h, j}, "negative value");
      }
      for (int w = 0; w < prefill_rows; ++w)
        for (int j = 0; j < T; ++j) {
          double v = prefill_at(l, h, w, j);
          if (std::isnan(v)) index_error("prefill_attn", {l, h, w, j}, "NaN");
          if (v < 0.0)
            index_error("prefill_attn", {l, h, w, j}, "negative value");
        }
      if (has_keys())
        for (int j = 0; j < T; ++j)
          for (int d = 0; d < shape.head_dim; ++d)
            if (std::isnan(key_at(l, h, j, d)))
              index_error("keys", {l, h, j, d}, "NaN");
    }
}

TraceBundle generate_synthetic_trace(const ModelShape& shape,
                                     std::uint64_t seed, Scenario scenario) {
  shape.validate();
  const int L = shape.num_layers, H = shape.num_heads, T = shape.prefill_len,
            K = shape.decode_len, D = shape.head_dim;
  const int W = std::min(32, T);

  TraceBundle b;
  b.shape = shape;
  b.prefill_rows = W;
  b.decode_attn.resize(shape.head_count() * K * T);
  b.vnorm.resize(shape.head_count() * T);
  b.prefill_attn.resize(shape.head_count() * W * T);
  if (D > 0) b.keys.resize(shape.head_count() * T * D);
  b.seed = seed;
  b.meta["generator"] = "lukv-synthetic";
  b.meta["scenario"] = to_string(scenario);

  const int scenario_id = static_cast<int>(scenario);

  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      HeadRng rng(head_seed(seed, scenario_id, l, h));
      const int flat = l * H + h;
      const HeadArchetype kind = archetype_for(scenario, flat);

      // Latent preference fields. u_dec drives decode attention (and hence
      // oracle importance); u_win drives the prefill observation window.
      std::vector<double> u_dec(T), u_win(T);
      std::vector<int> planted;
      double vnorm_scale = 1.0;

      switch (kind) {
        case HeadArchetype::narrow_aligned: {
          // A handful of dominant tokens; the window sees them too.
          for (int j = 0; j < T; ++j) u_dec[j] = 0.5 * rng.normal();
          const int n_spike = std::max(1, T / 32);
          for (int j : rng.sample(T, n_spike))
            u_dec[j] += 6.0 + 2.0 * rng.uniform();
          for (int j = 0; j < T; ++j)
            u_win[j] = u_dec[j] + 0.25 * rng.normal();
          break;
        }
        case HeadArchetype::broad_aligned: {
          // Graded importance spread over most of the context.
          for (int j = 0; j < T; ++j) u_dec[j] = 0.7 * rng.normal();
          for (int j = 0; j < T; ++j)
            u_win[j] = u_dec[j] + 0.2 * rng.normal();
          break;
        }
        case HeadArchetype::misaligned_planted: {
          // Decode mass concentrates on planted tokens the window scores low;
          // the window instead spikes on a wide decoy set. Planted positions
          // keep distance > the pooling radius from every decoy so max-pool
          // smearing cannot lift them.
          for (int j = 0; j < T; ++j) u_dec[j] = 0.5 * rng.normal();
          for (int j = 0; j < T; ++j) u_win[j] = 0.5 * rng.normal();
          const int n_plant = std::max(1, T / 32);
          const int n_decoy = std::max(1, T / 4);

          std::vector<int> stride4;
          for (int j = 1; j < T; j += 4) stride4.push_back(j);
          const auto picks =
              rng.sample(static_cast<int>(stride4.size()),
                         std::min<int>(n_plant, stride4.size()));
          for (int p : picks) planted.push_back(stride4[p]);

          std::vector<char> near_planted(T, 0);
          for (int j : planted)
            for (int d = std::max(0, j - 3); d <= std::min(T - 1, j + 3); ++d)
              near_planted[d] = 1;
          std::vector<int> decoy_candidates;
          for (int j = 0; j < T; ++j)
            if (!near_planted[j]) decoy_candidates.push_back(j);
          const auto decoy_picks = rng.sample(
              static_cast<int>(decoy_candidates.size()),
              std::min<int>(n_decoy, decoy_candidates.size()));

          for (int j : planted) {
            u_dec[j] += 6.0 + 2.0 * rng.uniform();
            u_win[j] -= 3.0;
          }
          for (int p : decoy_picks)
            u_win[decoy_candidates[p]] += 6.0 + 2.0 * rng.uniform();
          // Keep the head's overall mass small: a head whose metric cannot
          // find its important tokens should offer little marginal utility.
          vnorm_scale = 0.15;
          break;
        }
      }

      // Decode rows: softmax over T + k slots, keep the prefill columns.
      std::vector<double> logits(T);
      for (int k = 0; k < K; ++k) {
        for (int j = 0; j < T; ++j)
          logits[j] = u_dec[j] + 0.35 * rng.normal();
        std::vector<double> extra(k + 1);
        for (int e = 0; e <= k; ++e) extra[e] = 1.0 + 0.5 * rng.normal();
        std::vector<double> row = softmax_keep_prefix(logits, extra);
        for (int j = 0; j < T; ++j)
          b.decode_attn[((static_cast<std::size_t>(l) * H + h) * K + k) * T +
                        j] = snap_f32(row[j]);
      }

      // Prefill observation-window rows: softmax over the T prefill tokens.
      for (int w = 0; w < W; ++w) {
        for (int j = 0; j < T; ++j)
          logits[j] = u_win[j] + 0.35 * rng.normal();
        std::vector<double> row = softmax_keep_prefix(logits, {});
        for (int j = 0; j < T; ++j)
          b.prefill_attn[((static_cast<std::size_t>(l) * H + h) * W + w) * T +
                         j] = snap_f32(row[j]);
      }

      // Projected-value norms; planted tokens are boosted so importance is
      // driven by the attention * vnorm product.
      for (int j = 0; j < T; ++j)
        b.vnorm[(static_cast<std::size_t>(l) * H + h) * T + j] =
            snap_f32(vnorm_scale * rng.lognormal(0.0, 0.5));
      for (int j : planted) {
        std::size_t at = (static_cast<std::size_t>(l) * H + h) * T + j;
        b.vnorm[at] = snap_f32(b.vnorm[at] * (4.0 + 2.0 * rng.uniform()));
      }

      // Key vectors: a shared head direction plus noise; tokens with high
      // window preference drift off-axis, which is what a geometric
      // anomaly score keys on.
      if (D > 0) {
        std::vector<double> dir(D), off(D);
        double n1 = 0.0, n2 = 0.0;
        for (int d = 0; d < D; ++d) {
          dir[d] = rng.normal();
          off[d] = rng.normal();
          n1 += dir[d] * dir[d];
          n2 += off[d] * off[d];
        }
        n1 = std::sqrt(std::max(n1, 1e-30));
        n2 = std::sqrt(std::max(n2, 1e-30));
        for (int d = 0; d < D; ++d) {
          dir[d] /= n1;
          off[d] /= n2;
        }
        for (int j = 0; j < T; ++j) {
          double drift = 0.25 * std::max(0.0, u_win[j]);
          for (int d = 0; d < D; ++d) {
            double v = 3.0 * dir[d] + drift * off[d] + 0.4 * rng.normal();
            b.keys[((static_cast<std::size_t>(l) * H + h) * T + j) * D + d] =
                snap_f32(v);
          }
        }
      }
    }
  }

  b.validate();
  return b;
}

namespace detail {

void write_f32le(const std::filesystem::path& path,
                 const std::vector<double>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for write");
  std::vector<unsigned char> buf(data.size() * 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(data[i]));
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xff);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

std::vector<double> read_f32le(const std::filesystem::path& path,
                               const std::string& tensor,
                               std::size_t expected_elems) {
  std::error_code ec;
  const auto actual = std::filesystem::file_size(path, ec);
  if (ec)
    throw ValidationError("tensor '" + tensor + "': missing file " +
                          path.filename().string());
  if (actual != expected_elems * 4)
    throw ValidationError("tensor '" + tensor + "': size mismatch, expected " +
                          std::to_string(expected_elems * 4) +
                          " bytes, found " + std::to_string(actual));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<unsigned char> buf(expected_elems * 4);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!in) throw ValidationError("short read from " + path.string());
  std::vector<double> data(expected_elems);
  for (std::size_t i = 0; i < expected_elems; ++i) {
    std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i]) |
                         (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                         (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                         (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return data;
}

}  // namespace detail

namespace {

using detail::read_f32le;
using detail::write_f32le;

std::size_t dims_product(const std::vector<int>& dims) {
  std::size_t p = 1;
  for (int d : dims) p *= static_cast<std::size_t>(d);
  return p;
}

}  // namespace

void write_manifest(const TraceManifest& manifest,
                    const std::filesystem::path& path) {
  ordered_json j;
  j["schema_version"] = manifest.schema_version;
  j["shape"] = {{"L", manifest.shape.num_layers},
                {"H", manifest.shape.num_heads},
                {"T", manifest.shape.prefill_len},
                {"K_max", manifest.shape.decode_len},
                {"d_h", manifest.shape.head_dim}};
  ordered_json tensors = ordered_json::object();
  for (const auto& [name, entry] : manifest.tensors) {
    tensors[name] = {{"file", entry.file},
                     {"dims", entry.dims},
                     {"dtype", entry.dtype}};
  }
  j["tensors"] = tensors;
  if (manifest.seed) j["seed"] = *manifest.seed;
  if (!manifest.meta.empty()) j["meta"] = manifest.meta;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw ValidationError("cannot open " + path.string() + " for write");
  out << j.dump(2) << "\n";
  if (!out) throw ValidationError("short write to " + path.string());
}

TraceManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing manifest: " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " +
                          e.what());
  }
  TraceManifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    const auto& s = j.at("shape");
    m.shape.num_layers = s.at("L").get<int>();
    m.shape.num_heads = s.at("H").get<int>();
    m.shape.prefill_len = s.at("T").get<int>();
    m.shape.decode_len = s.at("K_max").get<int>();
    m.shape.head_dim = s.at("d_h").get<int>();
    for (const auto& [name, entry] : j.at("tensors").items()) {
      TensorEntry t;
      t.file = entry.at("file").get<std::string>();
      t.dims = entry.at("dims").get<std::vector<int>>();
      t.dtype = entry.at("dtype").get<std::string>();
      m.tensors[name] = t;
    }
    if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("meta"))
      m.meta = j.at("meta").get<std::map<std::string, std::string>>();
  } catch (const ordered_json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " +
                          e.what());
  }
  if (m.schema_version != 1)
    throw ValidationError("unsupported manifest schema_version " +
                          std::to_string(m.schema_version));
  return m;
}

std::filesystem::path save_trace(const TraceBundle& bundle,
                                 const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  const auto& s = bundle.shape;

  TraceManifest m;
  m.shape = s;
  m.seed = bundle.seed;
  m.meta = bundle.meta;

  m.tensors["decode_attn"] = TensorEntry{
      "decode_attn.f32",
      {s.num_layers, s.num_heads, s.decode_len, s.prefill_len}};
  write_f32le(dir / "decode_attn.f32", bundle.decode_attn);
  m.tensors["vnorm"] =
      TensorEntry{"vnorm.f32", {s.num_layers, s.num_heads, s.prefill_len}};
  write_f32le(dir / "vnorm.f32", bundle.vnorm);
  if (bundle.has_prefill()) {
    m.tensors["prefill_attn"] = TensorEntry{
        "prefill_attn.f32",
        {s.num_layers, s.num_heads, bundle.prefill_rows, s.prefill_len}};
    write_f32le(dir / "prefill_attn.f32", bundle.prefill_attn);
  }
  if (bundle.has_keys()) {
    m.tensors["keys"] = TensorEntry{
        "keys.f32", {s.num_layers, s.num_heads, s.prefill_len, s.head_dim}};
    write_f32le(dir / "keys.f32", bundle.keys);
  }

  const auto manifest_path = dir / "manifest.json";
  write_manifest(m, manifest_path);
  return manifest_path;
}

TraceBundle load_trace(const std::filesystem::path& dir) {
  const TraceManifest m = read_manifest(dir / "manifest.json");
  m.shape.validate();
  const auto& s = m.shape;

  TraceBundle b;
  b.shape = s;
  b.seed = m.seed;
  b.meta = m.meta;

  auto require = [&](const std::string& name,
                     const std::vector<int>& want_dims) -> const TensorEntry& {
    auto it = m.tensors.find(name);
    if (it == m.tensors.end())
      throw ValidationError("tensor '" + name + "': missing from manifest");
    const TensorEntry& e = it->second;
    if (e.dtype != "f32le")
      throw ValidationError("tensor '" + name + "': unsupported dtype " +
                            e.dtype);
    if (!want_dims.empty() && e.dims != want_dims)
      throw ValidationError("tensor '" + name +
                            "': dims do not match manifest shape");
    return e;
  };

  {
    const auto& e = require(
        "decode_attn", {s.num_layers, s.num_heads, s.decode_len, s.prefill_len});
    b.decode_attn = read_f32le(dir / e.file, "decode_attn", dims_product(e.dims));
  }
  {
    const auto& e =
        require("vnorm", {s.num_layers, s.num_heads, s.prefill_len});
    b.vnorm = read_f32le(dir / e.file, "vnorm", dims_product(e.dims));
  }
  if (m.tensors.count("prefill_attn")) {
    const auto& e = require("prefill_attn", {});
    if (e.dims.size() != 4 || e.dims[0] != s.num_layers ||
        e.dims[1] != s.num_heads || e.dims[3] != s.prefill_len ||
        e.dims[2] < 1)
      throw ValidationError("tensor 'prefill_attn': dims do not match shape");
    b.prefill_rows = e.dims[2];
    b.prefill_attn =
        read_f32le(dir / e.file, "prefill_attn", dims_product(e.dims));
  }
  if (m.tensors.count("keys")) {
    if (s.head_dim < 1)
      throw ValidationError("tensor 'keys': manifest declares keys but d_h=0");
    const auto& e =
        require("keys", {s.num_layers, s.num_heads, s.prefill_len, s.head_dim});
    b.keys = read_f32le(dir / e.file, "keys", dims_product(e.dims));
  }

  b.validate();
  return b;
}

}  // namespace lukv
