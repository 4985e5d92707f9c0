#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lukv/allocation_io.hpp"
#include "lukv/evaluate.hpp"
#include "lukv/selftest.hpp"
#include "lukv/util.hpp"

#include <sstream>

namespace py = pybind11;
using namespace lukv;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_array(const std::vector<double>& data,
                             std::vector<py::ssize_t> dims) {
  py::array_t<double> out(dims);
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

std::vector<double> from_array(const DArray& arr) {
  return {arr.data(), arr.data() + arr.size()};
}

Ranking ranking_from_array(const IArray& arr) {
  if (arr.ndim() != 3)
    throw ConfigError("ranking arrays must have shape [L, H, T]");
  Ranking r;
  r.num_layers = static_cast<int>(arr.shape(0));
  r.num_heads = static_cast<int>(arr.shape(1));
  r.positions = static_cast<int>(arr.shape(2));
  r.order.assign(arr.data(), arr.data() + arr.size());
  return r;
}

py::array_t<int> ranking_to_array(const Ranking& r) {
  py::array_t<int> out({static_cast<py::ssize_t>(r.num_layers),
                        static_cast<py::ssize_t>(r.num_heads),
                        static_cast<py::ssize_t>(r.positions)});
  std::copy(r.order.begin(), r.order.end(), out.mutable_data());
  return out;
}

ScoreMatrix scores_from_array(const DArray& arr) {
  if (arr.ndim() != 3)
    throw ConfigError("score arrays must have shape [L, H, T]");
  ScoreMatrix s;
  s.num_layers = static_cast<int>(arr.shape(0));
  s.num_heads = static_cast<int>(arr.shape(1));
  s.positions = static_cast<int>(arr.shape(2));
  s.values = from_array(arr);
  return s;
}

py::array_t<double> scores_to_array(const ScoreMatrix& s) {
  return to_array(s.values, {s.num_layers, s.num_heads, s.positions});
}

std::vector<LossCurve> curves_from_array(const DArray& arr) {
  if (arr.ndim() != 2)
    throw ConfigError("curve arrays must have shape [heads, T+1]");
  std::vector<LossCurve> curves(static_cast<std::size_t>(arr.shape(0)));
  const py::ssize_t width = arr.shape(1);
  for (py::ssize_t i = 0; i < arr.shape(0); ++i) {
    curves[i].head = {0, static_cast<int>(i)};
    curves[i].values.assign(arr.data() + i * width,
                            arr.data() + (i + 1) * width);
  }
  return curves;
}

py::array_t<int> budgets_to_array(const BudgetAllocation& a) {
  py::array_t<int> out({static_cast<py::ssize_t>(a.num_layers),
                        static_cast<py::ssize_t>(a.num_heads)});
  std::copy(a.budgets.begin(), a.budgets.end(), out.mutable_data());
  return out;
}

BudgetAllocation allocation_from_budgets(const IArray& budgets,
                                         const std::string& solver) {
  if (budgets.ndim() != 2)
    throw ConfigError("budget arrays must have shape [L, H]");
  BudgetAllocation a;
  a.num_layers = static_cast<int>(budgets.shape(0));
  a.num_heads = static_cast<int>(budgets.shape(1));
  a.budgets.assign(budgets.data(), budgets.data() + budgets.size());
  for (int b : a.budgets) a.total_budget += b;
  a.solver = solver;
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Long-horizon utility KV cache budget allocation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError",
                                          PyExc_ValueError);
  py::register_exception<InfeasibleError>(m, "InfeasibleError",
                                          PyExc_ValueError);

  py::enum_<Scenario>(m, "Scenario")
      .value("aligned", Scenario::aligned)
      .value("misaligned", Scenario::misaligned)
      .value("mixed", Scenario::mixed);

  py::enum_<MetricKind>(m, "MetricKind")
      .value("snapkv", MetricKind::snapkv)
      .value("keydiff", MetricKind::keydiff)
      .value("oracle", MetricKind::oracle_passthrough);

  py::class_<ModelShape>(m, "ModelShape")
      .def(py::init([](int L, int H, int T, int K_max, int d_h) {
             ModelShape s{L, H, T, K_max, d_h};
             s.validate();
             return s;
           }),
           py::arg("L"), py::arg("H"), py::arg("T"), py::arg("K_max"),
           py::arg("d_h") = 0)
      .def_readonly("L", &ModelShape::num_layers)
      .def_readonly("H", &ModelShape::num_heads)
      .def_readonly("T", &ModelShape::prefill_len)
      .def_readonly("K_max", &ModelShape::decode_len)
      .def_readonly("d_h", &ModelShape::head_dim)
      .def("__repr__", [](const ModelShape& s) {
        std::ostringstream os;
        os << "ModelShape(L=" << s.num_layers << ", H=" << s.num_heads
           << ", T=" << s.prefill_len << ", K_max=" << s.decode_len
           << ", d_h=" << s.head_dim << ")";
        return os.str();
      });

  py::class_<MetricSpec>(m, "MetricSpec")
      .def(py::init([](MetricKind kind, int window, int kernel) {
             MetricSpec spec = MetricSpec::defaults_for(kind);
             if (window > 0) spec.window_size = window;
             if (kernel > 0) spec.kernel_size = kernel;
             return spec;
           }),
           py::arg("kind"), py::arg("window_size") = 0,
           py::arg("kernel_size") = 0)
      .def_readonly("kind", &MetricSpec::kind)
      .def_readonly("window_size", &MetricSpec::window_size)
      .def_readonly("kernel_size", &MetricSpec::kernel_size);

  py::class_<Safeguards>(m, "Safeguards")
      .def(py::init([](int sink, int window, double max_compression) {
             Safeguards sg{sink, window, max_compression};
             sg.validate();
             return sg;
           }),
           py::arg("sink_size") = 4, py::arg("recent_window") = 32,
           py::arg("max_compression") = 0.99)
      .def_static("defaults_for", &Safeguards::defaults_for)
      .def_readonly("sink_size", &Safeguards::sink_size)
      .def_readonly("recent_window", &Safeguards::recent_window)
      .def_readonly("max_compression", &Safeguards::max_compression);

  py::class_<TraceBundle>(m, "TraceBundle")
      .def(py::init([](const ModelShape& shape, const DArray& decode_attn,
                       const DArray& vnorm, py::object prefill_attn,
                       py::object keys) {
             TraceBundle b;
             b.shape = shape;
             b.decode_attn = from_array(decode_attn);
             b.vnorm = from_array(vnorm);
             if (!prefill_attn.is_none()) {
               DArray arr = prefill_attn.cast<DArray>();
               if (arr.ndim() != 4)
                 throw ConfigError("prefill_attn must have shape [L,H,W,T]");
               b.prefill_rows = static_cast<int>(arr.shape(2));
               b.prefill_attn = from_array(arr);
             }
             if (!keys.is_none()) b.keys = from_array(keys.cast<DArray>());
             b.validate();
             return b;
           }),
           py::arg("shape"), py::arg("decode_attn"), py::arg("vnorm"),
           py::arg("prefill_attn") = py::none(), py::arg("keys") = py::none())
      .def_readonly("shape", &TraceBundle::shape)
      .def_property_readonly("decode_attn",
                             [](const TraceBundle& b) {
                               return to_array(
                                   b.decode_attn,
                                   {b.shape.num_layers, b.shape.num_heads,
                                    b.shape.decode_len, b.shape.prefill_len});
                             })
      .def_property_readonly("vnorm",
                             [](const TraceBundle& b) {
                               return to_array(b.vnorm,
                                               {b.shape.num_layers,
                                                b.shape.num_heads,
                                                b.shape.prefill_len});
                             })
      .def_property_readonly(
          "prefill_attn",
          [](const TraceBundle& b) -> py::object {
            if (!b.has_prefill()) return py::none();
            return to_array(b.prefill_attn,
                            {b.shape.num_layers, b.shape.num_heads,
                             b.prefill_rows, b.shape.prefill_len});
          })
      .def_property_readonly("keys",
                             [](const TraceBundle& b) -> py::object {
                               if (!b.has_keys()) return py::none();
                               return to_array(
                                   b.keys,
                                   {b.shape.num_layers, b.shape.num_heads,
                                    b.shape.prefill_len, b.shape.head_dim});
                             })
      .def_property_readonly(
          "seed",
          [](const TraceBundle& b) -> py::object {
            if (!b.seed) return py::none();
            return py::cast(*b.seed);
          })
      .def_readonly("meta", &TraceBundle::meta)
      .def("__eq__", [](const TraceBundle& a, const TraceBundle& b) {
        return a == b;
      });

  py::class_<ImportanceTensor>(m, "ImportanceTensor")
      .def_readonly("shape", &ImportanceTensor::shape)
      .def_property_readonly("values",
                             [](const ImportanceTensor& t) {
                               return to_array(t.values,
                                               {t.shape.num_layers,
                                                t.shape.num_heads,
                                                t.shape.prefill_len});
                             })
      .def_property_readonly("normalized", [](const ImportanceTensor& t) {
        return t.normalization == Normalization::intra_layer;
      });

  py::class_<BudgetAllocation>(m, "BudgetAllocation")
      .def_property_readonly("budgets", &budgets_to_array)
      .def_readonly("total_budget", &BudgetAllocation::total_budget)
      .def_readonly("objective", &BudgetAllocation::objective)
      .def_readonly("solver", &BudgetAllocation::solver);

  py::class_<Profile>(m, "Profile")
      .def_readonly("metric", &Profile::metric)
      .def_readonly("L", &Profile::num_layers)
      .def_readonly("H", &Profile::num_heads)
      .def_readonly("grid", &Profile::grid)
      .def_readonly("query_count", &Profile::query_count)
      .def_readonly("r_cap", &Profile::r_cap)
      .def_readonly("safeguards", &Profile::safeguards)
      .def_property_readonly("ratios", [](const Profile& p) {
        return to_array(p.ratios,
                        {p.num_layers, p.num_heads,
                         static_cast<int>(p.grid.size())});
      });

  py::class_<EvalReport>(m, "EvalReport")
      .def_property_readonly("head_loss",
                             [](const EvalReport& r) {
                               return to_array(r.head_loss,
                                               {r.num_layers, r.num_heads});
                             })
      .def_property_readonly(
          "layer_loss",
          [](const EvalReport& r) {
            return to_array(r.layer_loss, {r.num_layers});
          })
      .def_readonly("total_loss", &EvalReport::total_loss);

  // trace generation and I/O
  m.def("generate_synthetic_trace", &generate_synthetic_trace,
        py::arg("shape"), py::arg("seed"), py::arg("scenario"));
  m.def("save_trace", &save_trace, py::arg("bundle"), py::arg("dir"));
  m.def("load_trace", &load_trace, py::arg("dir"));

  // oracle importance and rankings
  m.def("compute_oracle_importance", &compute_oracle_importance,
        py::arg("trace"), py::arg("normalize") = true);
  m.def("oracle_ranking", [](const ImportanceTensor& imp) {
    return ranking_to_array(oracle_ranking(imp));
  });
  m.def(
      "metric_scores",
      [](const TraceBundle& trace, const MetricSpec& spec) {
        return scores_to_array(metric_scores(trace, spec));
      },
      py::arg("trace"), py::arg("spec"));
  m.def("metric_ranking", [](const DArray& scores) {
    return ranking_to_array(metric_ranking(scores_from_array(scores)));
  });

  // loss curves and decomposition
  m.def(
      "loss_curve",
      [](const ImportanceTensor& imp, int layer, int head,
         const IArray& ranking) {
        const LossCurve c =
            loss_curve(imp, {layer, head}, ranking_from_array(ranking));
        return to_array(c.values, {static_cast<int>(c.values.size())});
      },
      py::arg("importance"), py::arg("layer"), py::arg("head"),
      py::arg("ranking"));
  m.def(
      "eviction_loss",
      [](const ImportanceTensor& imp, int layer, int head,
         const std::vector<int>& retained) {
        return eviction_loss(imp, {layer, head}, retained);
      },
      py::arg("importance"), py::arg("layer"), py::arg("head"),
      py::arg("retained"));
  m.def(
      "decompose",
      [](const ImportanceTensor& imp, int layer, int head,
         const IArray& oracle_rank, const IArray& metric_rank, int budget) {
        const auto [sets, gap] =
            decompose(imp, {layer, head}, ranking_from_array(oracle_rank),
                      ranking_from_array(metric_rank), budget);
        py::dict out;
        out["hits"] = sets.hits;
        out["misses"] = sets.misses;
        out["false_positives"] = sets.false_positives;
        out["heuristic_loss"] = gap.heuristic_loss;
        out["oracle_loss"] = gap.oracle_loss;
        out["optimality_gap"] = gap.optimality_gap;
        return out;
      },
      py::arg("importance"), py::arg("layer"), py::arg("head"),
      py::arg("oracle_ranking"), py::arg("metric_ranking"), py::arg("budget"));
  m.def(
      "recall_curve",
      [](const ImportanceTensor& imp, int layer, int head,
         const IArray& ranking, const std::vector<double>& ratios) {
        return recall_curve(imp, {layer, head}, ranking_from_array(ranking),
                            ratios);
      },
      py::arg("importance"), py::arg("layer"), py::arg("head"),
      py::arg("ranking"), py::arg("ratios"));
  m.def(
      "second_difference_witness",
      [](const ImportanceTensor& imp, int layer, int head,
         const IArray& ranking) {
        return second_difference_witness(imp, {layer, head},
                                         ranking_from_array(ranking));
      },
      py::arg("importance"), py::arg("layer"), py::arg("head"),
      py::arg("ranking"));

  // convexification and allocation
  m.def("pava_convexify", [](const DArray& curve) {
    if (curve.ndim() != 1)
      throw ConfigError("pava_convexify expects a 1-D loss curve");
    LossCurve c;
    c.head = {0, 0};
    c.values = from_array(curve);
    const ConvexLossCurve s = pava_convexify(c);
    return to_array(s.values, {static_cast<int>(s.values.size())});
  });
  m.def(
      "greedy_allocate",
      [](const DArray& convex_curves, int L, int H, long long B) {
        std::vector<MarginalGains> gains;
        for (const LossCurve& c : curves_from_array(convex_curves)) {
          ConvexLossCurve s = pava_convexify(c);
          gains.push_back(marginal_gains(s));
        }
        return greedy_allocate(gains, L, H, B);
      },
      py::arg("curves"), py::arg("L"), py::arg("H"), py::arg("total_budget"));
  m.def(
      "mckp_dp_allocate",
      [](const DArray& curves, int L, int H, long long B) {
        return mckp_dp_allocate(curves_from_array(curves), L, H, B);
      },
      py::arg("curves"), py::arg("L"), py::arg("H"), py::arg("total_budget"));
  m.def(
      "brute_force_allocate",
      [](const DArray& curves, int L, int H, long long B) {
        return brute_force_allocate(curves_from_array(curves), L, H, B);
      },
      py::arg("curves"), py::arg("L"), py::arg("H"), py::arg("total_budget"));
  m.def("uniform_allocate", &uniform_allocate, py::arg("L"), py::arg("H"),
        py::arg("T"), py::arg("total_budget"));
  m.def("pyramid_allocate", &pyramid_allocate, py::arg("L"), py::arg("H"),
        py::arg("T"), py::arg("total_budget"), py::arg("beta") = 20.0);
  m.def(
      "adaptive_topk_allocate",
      [](const DArray& scores, long long B, double alpha) {
        return adaptive_topk_allocate(scores_from_array(scores), B, alpha);
      },
      py::arg("scores"), py::arg("total_budget"), py::arg("alpha") = 0.20);

  // offline profiling and online budgeting
  m.def(
      "solve_ratio_grid",
      [](const TraceBundle& trace, const MetricSpec& spec,
         const std::vector<double>& grid) {
        const auto flat = solve_ratio_grid(trace, spec, grid);
        return to_array(flat, {trace.shape.num_layers, trace.shape.num_heads,
                               static_cast<int>(grid.size())});
      },
      py::arg("trace"), py::arg("spec"), py::arg("grid"));
  m.def(
      "aggregate_profile",
      [](const std::vector<DArray>& per_query, const std::vector<double>& grid,
         const std::string& metric, double r_cap, const Safeguards& sg) {
        if (per_query.empty())
          throw ConfigError("need at least one query tensor");
        const auto& first = per_query.front();
        if (first.ndim() != 3)
          throw ConfigError("query tensors must have shape [L, H, grid]");
        std::vector<std::vector<double>> flat;
        for (const auto& q : per_query) flat.push_back(from_array(q));
        return aggregate_profile(flat, static_cast<int>(first.shape(0)),
                                 static_cast<int>(first.shape(1)), grid,
                                 metric, r_cap, sg);
      },
      py::arg("per_query"), py::arg("grid"), py::arg("metric"),
      py::arg("r_cap") = 0.99, py::arg("safeguards") = Safeguards{});
  m.def(
      "lookup_ratios",
      [](const Profile& p, double sigma) {
        return to_array(lookup_ratios(p, sigma), {p.num_layers, p.num_heads});
      },
      py::arg("profile"), py::arg("sigma_target"));
  m.def(
      "budget_from_ratios",
      [](const DArray& ratios, int tokens, const Safeguards& sg) {
        const auto flat = from_array(ratios);
        const auto budgets = budget_from_ratios(flat, tokens, sg);
        py::array_t<int> out(static_cast<py::ssize_t>(budgets.size()));
        std::copy(budgets.begin(), budgets.end(), out.mutable_data());
        return out;
      },
      py::arg("ratios"), py::arg("tokens"), py::arg("safeguards"));
  m.def(
      "apply_eviction",
      [](const IArray& ranking, const IArray& budgets, const Safeguards& sg) {
        const std::vector<int> flat(budgets.data(),
                                    budgets.data() + budgets.size());
        return apply_eviction(ranking_from_array(ranking), flat, sg);
      },
      py::arg("ranking"), py::arg("budgets"), py::arg("safeguards"));
  m.def("save_profile", &save_profile, py::arg("profile"), py::arg("path"));
  m.def("load_profile", &load_profile, py::arg("path"));

  // evaluation
  m.def(
      "evaluate_allocation",
      [](const TraceBundle& trace, const MetricSpec& spec,
         const IArray& budgets) {
        return evaluate_allocation(trace, spec,
                                   allocation_from_budgets(budgets, "custom"));
      },
      py::arg("trace"), py::arg("spec"), py::arg("budgets"));
  m.def(
      "compare_solvers",
      [](const TraceBundle& trace, const MetricSpec& spec,
         const std::vector<double>& sigmas) {
        py::list rows;
        for (const auto& row : compare_solvers(trace, spec, sigmas)) {
          py::dict d;
          d["sigma"] = row.sigma;
          d["total_budget"] = row.total_budget;
          d["greedy_relaxed"] = row.greedy_relaxed;
          d["dp_convex"] = row.dp_convex;
          d["dp_raw"] = row.dp_raw;
          d["greedy_raw"] = row.greedy_raw;
          rows.append(d);
        }
        return rows;
      },
      py::arg("trace"), py::arg("spec"), py::arg("sigmas"));

  m.def("default_ratio_grid", &default_ratio_grid);
  m.def("selftest", []() {
    std::ostringstream os;
    const int failures = lukv::selftest::run_all(os);
    py::print(os.str());
    return failures;
  });

  m.attr("__version__") = "0.1.0";
}
