// Python module pdinterp._core: phantoms, network shapes, attribution
// scoring, statistics and the pipeline stages.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "pdinterp/attribution.h"
#include "pdinterp/error.h"
#include "pdinterp/interp_eval.h"
#include "pdinterp/network.h"
#include "pdinterp/phantom.h"
#include "pdinterp/pipeline.h"
#include "pdinterp/selection.h"
#include "pdinterp/stats.h"

namespace py = pybind11;
using namespace pdinterp;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> volume_array(Extent3 e, const std::vector<T>& values) {
  py::array_t<T> out({e.z, e.y, e.x});
  std::memcpy(out.mutable_data(), values.data(), values.size() * sizeof(T));
  return out;
}

SliceImage slice_from(const DoubleArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  SliceImage s(a.shape(0), a.shape(1));
  std::memcpy(s.values.data(), a.data(), s.values.size() * sizeof(double));
  return s;
}

BinaryMask2D mask_from(const ByteArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  BinaryMask2D m(a.shape(0), a.shape(1));
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = a.data()[i] != 0;
  return m;
}

py::array_t<bool> mask_array(const BinaryMask2D& m) {
  py::array_t<bool> out({m.ny, m.nx});
  for (std::size_t i = 0; i < m.bits.size(); ++i) out.mutable_data()[i] = m.bits[i] != 0;
  return out;
}

py::dict test_dict(const TestResult& r) {
  py::dict d;
  d["test"] = r.test;
  d["method"] = r.method;
  d["statistic"] = r.statistic;
  d["p_value"] = r.p_value;
  d["n"] = r.n;
  d["degenerate"] = r.degenerate;
  return d;
}

RunConfig config_from(const std::string& json_text, const std::string& out) {
  RunConfig c = parse_run_config(json_text.empty() ? "{}" : json_text);
  if (!out.empty()) c.out = out;
  return c;
}

std::vector<std::string> stage_outputs(const std::vector<StageResult>& results) {
  std::vector<std::string> out;
  for (const auto& r : results) out.push_back(r.manifest.string());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Interpretable DaT-SPECT classification on synthetic phantoms";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<MissingArtifactError>(m, "MissingArtifactError", PyExc_FileNotFoundError);

  m.attr("__version__") = std::string(code_version());

  m.def("architecture_tags", &architecture_tags);

  m.def(
      "network_layers",
      [](const std::string& tag, const std::string& grid) {
        const auto spec = build_network(tag, parse_grid(grid));
        const auto shapes = spec.output_shapes();
        py::list out;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
          py::dict d;
          d["kind"] = std::string(layer_kind_name(spec.layers[i].kind));
          d["channels"] = shapes[i].channels;
          d["extent"] = py::make_tuple(shapes[i].extent.z, shapes[i].extent.y, shapes[i].extent.x);
          out.append(d);
        }
        return out;
      },
      py::arg("tag"), py::arg("grid") = "full", "Per-layer output channels and (z, y, x) extents.");

  m.def(
      "dense_input_features",
      [](const std::string& tag, const std::string& grid) {
        return build_network(tag, parse_grid(grid)).dense_input_features();
      },
      py::arg("tag"), py::arg("grid") = "full");

  m.def(
      "generate_subject",
      [](int index, std::uint64_t seed, const std::string& grid, int cohort_size) {
        PhantomConfig pc;
        pc.seed = seed;
        pc.grid = parse_grid(grid);
        pc.cohort_size = cohort_size;
        const auto cohort = build_cohort(pc);
        if (index < 0 || index >= static_cast<int>(cohort.size())) throw ConfigError("subject index out of range");
        const auto& rec = cohort[static_cast<std::size_t>(index)];
        const auto g = generate_subject(pc, rec);
        py::dict d;
        d["id"] = rec.id;
        d["label"] = rec.label;
        d["laterality"] = std::string(laterality_name(rec.params.laterality));
        d["depletion"] = rec.params.depletion;
        d["volume"] = volume_array(g.volume.extent, g.volume.data);
        d["structures"] = volume_array(g.volume.extent, g.structures);
        return d;
      },
      py::arg("index"), py::arg("seed") = 0, py::arg("grid") = "half", py::arg("cohort_size") = 607,
      "Volume (z, y, x) in [0, 1] and striatal label map of one cohort subject.");

  m.def(
      "slice_average",
      [](const DoubleArray& volume) {
        if (volume.ndim() != 3) throw ShapeError("expected a (z, y, x) volume");
        const Extent3 e{volume.shape(0), volume.shape(1), volume.shape(2)};
        const auto s = slice_average(e, std::span<const double>(volume.data(), static_cast<std::size_t>(volume.size())),
                                     "", "array");
        py::array_t<double> out({s.ny, s.nx});
        std::memcpy(out.mutable_data(), s.values.data(), s.values.size() * sizeof(double));
        return out;
      },
      py::arg("volume"), "Normalized mean over the striatal slice window.");

  m.def("topk_mask", [](const DoubleArray& slice, double k) { return mask_array(topk_binarize(slice_from(slice), k)); },
        py::arg("slice"), py::arg("k_percent"));
  m.def("ground_truth_mask",
        [](const DoubleArray& slice, int label) { return mask_array(segment_ground_truth(slice_from(slice), label)); },
        py::arg("slice"), py::arg("label"));
  m.def("dice", [](const ByteArray& p, const ByteArray& g) { return dice(mask_from(p), mask_from(g)); },
        py::arg("predicted"), py::arg("truth"));

  m.def("roc_auc", [](const std::vector<double>& s, const std::vector<int>& l) { return roc_auc(s, l).auc; },
        py::arg("scores"), py::arg("labels"));
  m.def(
      "mcnemar",
      [](const std::vector<int>& a, const std::vector<int>& b, const std::vector<int>& labels,
         const std::string& method) {
        McNemarMethod mm = McNemarMethod::kChiSquare;
        if (method == "exact") mm = McNemarMethod::kExact;
        else if (method == "auto") mm = McNemarMethod::kAuto;
        else if (method != "chi-square") throw ConfigError("method must be chi-square, exact or auto");
        return test_dict(mcnemar(a, b, labels, mm));
      },
      py::arg("predictions_a"), py::arg("predictions_b"), py::arg("labels"), py::arg("method") = "chi-square");
  m.def("wilcoxon", [](const std::vector<double>& a, const std::vector<double>& b) {
    return test_dict(wilcoxon_signed_rank(a, b));
  }, py::arg("a"), py::arg("b"));

  m.def(
      "kernel_shap_values",
      [](int players, const std::function<double(std::vector<int>)>& value, int samples, int max_exact_players,
         std::uint64_t seed) {
        ShapOptions o;
        o.samples = samples;
        o.max_exact_players = max_exact_players;
        o.seed = seed;
        const auto r = kernel_shap_values(
            players,
            [&](const std::vector<std::vector<std::uint8_t>>& rows) {
              std::vector<double> out;
              out.reserve(rows.size());
              for (const auto& z : rows) out.push_back(value(std::vector<int>(z.begin(), z.end())));
              return out;
            },
            o);
        py::dict d;
        d["phi"] = r.phi;
        d["phi0"] = r.phi0;
        d["full_value"] = r.full_value;
        d["exact"] = r.exact;
        d["coalitions"] = r.coalitions;
        return d;
      },
      py::arg("players"), py::arg("value"), py::arg("samples") = 2048, py::arg("max_exact_players") = 16,
      py::arg("seed") = 0, "Shapley values of value(presence list) by kernel-weighted least squares.");

  m.def("canonical_config", [](const std::string& j) { return canonical_config_json(config_from(j, "")); },
        py::arg("config_json") = "{}");
  m.def("config_digest", [](const std::string& j) { return config_digest(config_from(j, "")); },
        py::arg("config_json") = "{}");

  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config_json, const std::string& out, const std::string& format) {
        const RunConfig c = config_from(config_json, out);
        py::gil_scoped_release release;
        RunLock lock(c.out);
        if (stage == "generate-data") return stage_outputs(cmd_generate_data(c));
        if (stage == "train") return stage_outputs(cmd_train(c));
        if (stage == "baseline") return stage_outputs(cmd_baseline(c));
        if (stage == "attribute") return stage_outputs(cmd_attribute(c));
        if (stage == "evaluate") return stage_outputs(cmd_evaluate(c));
        if (stage == "stats") return stage_outputs(cmd_stats(c));
        if (stage == "select-model") return stage_outputs(cmd_select_model(c, {}));
        if (stage == "export") return stage_outputs(cmd_export(c, format));
        throw ConfigError("unknown stage '" + stage + "'");
      },
      py::arg("stage"), py::arg("config_json") = "{}", py::arg("out") = "", py::arg("format") = "csv",
      "Runs one pipeline stage and returns the written stage manifests.");

  m.def(
      "select_model",
      [](const std::string& classification_csv, const std::string& interp_csv, double alpha) {
        const auto models = parse_classification_csv(classification_csv);
        SelectionOptions o;
        o.alpha = alpha;
        if (interp_csv.empty()) return selection_report_json(select_model(models, nullptr, o));
        const auto interp = parse_interp_csv(interp_csv);
        return selection_report_json(select_model(models, &interp, o));
      },
      py::arg("classification_csv"), py::arg("interp_csv") = "", py::arg("alpha") = 0.05,
      "Selection report JSON from classification and interpretation CSV text.");
}
