// SPDX-License-Identifier: Apache-2.0
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qelab/compressor.hpp"
#include "qelab/errors.hpp"
#include "qelab/evaluator.hpp"
#include "qelab/experiment.hpp"
#include "qelab/trainer.hpp"

namespace py = pybind11;
using namespace qelab;

namespace {

using Model = QeModel<float>;

nlohmann::json to_cpp(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict counts_dict(const ParamCounts& c) {
  py::dict d;
  d["embedding"] = c.embedding;
  d["per_encoder_layer"] = c.per_encoder_layer;
  d["head"] = c.head;
  d["total"] = c.total;
  return d;
}

ExperimentConfig config_from(const py::object& overrides) {
  nlohmann::json j = ExperimentConfig{};
  if (!overrides.is_none()) j.merge_patch(to_cpp(overrides));
  return j.get<ExperimentConfig>();
}

}  // namespace

PYBIND11_MODULE(_qelab, m) {
  m.doc() = "Quality-estimation compression lab";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  static py::exception<UsageError> usage(m, "UsageError", error.ptr());
  static py::exception<DimensionError> dimension(m, "DimensionError", usage.ptr());
  static py::exception<ConfigError> config(m, "ConfigError", usage.ptr());
  static py::exception<ModeError> mode(m, "ModeError", usage.ptr());
  static py::exception<DataError> data(m, "DataError", error.ptr());
  static py::exception<FormatError> format(m, "FormatError", data.ptr());
  static py::exception<ChecksumError> checksum(m, "ChecksumError", format.ptr());
  static py::exception<NumericError> numeric(m, "NumericError", error.ptr());
  // Most derived first.
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ChecksumError& e) {
      py::set_error(checksum, e.what());
    } catch (const FormatError& e) {
      py::set_error(format, e.what());
    } catch (const DataError& e) {
      py::set_error(data, e.what());
    } catch (const DimensionError& e) {
      py::set_error(dimension, e.what());
    } catch (const ConfigError& e) {
      py::set_error(config, e.what());
    } catch (const ModeError& e) {
      py::set_error(mode, e.what());
    } catch (const UsageError& e) {
      py::set_error(usage, e.what());
    } catch (const NumericError& e) {
      py::set_error(numeric, e.what());
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<SentencePair>(m, "SentencePair")
      .def(py::init([](std::string src, std::string mt, std::string lang, double da_mean, double da_z) {
             return SentencePair{std::move(src), std::move(mt), std::move(lang), da_mean, da_z};
           }),
           py::arg("src"), py::arg("mt"), py::arg("lang_pair") = "", py::arg("da_mean") = 0.0,
           py::arg("da_z") = 0.0)
      .def_readwrite("src", &SentencePair::src)
      .def_readwrite("mt", &SentencePair::mt)
      .def_readwrite("lang_pair", &SentencePair::lang_pair)
      .def_readwrite("da_mean", &SentencePair::da_mean)
      .def_readwrite("da_z", &SentencePair::da_z)
      .def("__repr__", [](const SentencePair& p) {
        return "SentencePair(lang_pair='" + p.lang_pair + "', da_mean=" + std::to_string(p.da_mean) + ")";
      });

  py::class_<Splits>(m, "Splits")
      .def(py::init<>())
      .def_readwrite("train", &Splits::train)
      .def_readwrite("dev", &Splits::dev)
      .def_readwrite("test", &Splits::test);

  m.def(
      "synthesize",
      [](std::size_t n_languages, std::size_t n_train, std::size_t n_dev, std::size_t n_test, double max_corruption,
         double noise_sigma, std::uint64_t seed) {
        auto spec = SynthSpec::with_languages(n_languages);
        spec.n_train = n_train;
        spec.n_dev = n_dev;
        spec.n_test = n_test;
        spec.max_corruption = max_corruption;
        spec.noise_sigma = noise_sigma;
        spec.seed = seed;
        return synthesize_corpus(spec);
      },
      py::arg("n_languages") = 1, py::arg("n_train") = 5000, py::arg("n_dev") = 500, py::arg("n_test") = 1000,
      py::arg("max_corruption") = 0.8, py::arg("noise_sigma") = 2.0, py::arg("seed") = 1,
      "Synthetic corpus keyed by language tag.");

  m.def(
      "load_tsv",
      [](const std::filesystem::path& path, const std::string& lang) {
        return load_mlqepe_tsv(path, ColumnMap{}, lang);
      },
      py::arg("path"), py::arg("lang_pair") = "");

  m.def(
      "pearson", [](const std::vector<double>& xs, const std::vector<double>& ys) { return pearson(xs, ys); },
      py::arg("xs"), py::arg("ys"));
  m.def(
      "f1",
      [](const std::vector<bool>& preds, const std::vector<bool>& golds) {
        const std::vector<std::uint8_t> p(preds.begin(), preds.end()), g(golds.begin(), golds.end());
        return f1(p, g).value;
      },
      py::arg("preds"), py::arg("golds"));

  m.def(
      "default_config", [] { return to_py(nlohmann::json(ExperimentConfig{})); },
      "Experiment configuration with every default filled in.");
  m.def(
      "expected_param_counts", [](const py::object& model) { return counts_dict(expected_param_counts(to_cpp(model))); },
      py::arg("model_config"));

  py::class_<Model>(m, "Model")
      .def_property_readonly("config", [](const Model& self) { return to_py(nlohmann::json(self.config)); })
      .def_property_readonly("n_layers", [](const Model& self) { return self.layers.size(); })
      .def(
          "predict",
          [](const Model& self, const std::vector<SentencePair>& pairs) {
            py::gil_scoped_release release;
            return predict(self, pairs);
          },
          py::arg("pairs"), "Raw head outputs: z-space scores or logits.")
      .def(
          "evaluate",
          [](const Model& self, const std::vector<SentencePair>& pairs, const std::vector<double>& thresholds) {
            EvalResult r;
            {
              py::gil_scoped_release release;
              r = evaluate(self, pairs, thresholds);
            }
            return to_py(nlohmann::json(r.report));
          },
          py::arg("pairs"), py::arg("thresholds") = std::vector<double>{51.0, 70.0})
      .def("param_counts", [](const Model& self) { return counts_dict(count_params(self)); })
      .def("prune_layers", [](const Model& self, std::size_t n) { return prune_layers(self, n); }, py::arg("n_drop"))
      .def(
          "compress",
          [](const Model& self, const py::object& plan, const Splits& data, const py::object& overrides,
             std::uint64_t seed) {
            const auto cfg = config_from(overrides);
            const auto p = to_cpp(plan).get<CompressionPlan>();
            py::gil_scoped_release release;
            return compress(self, p, data, compress_options(cfg, seed)).model;
          },
          py::arg("plan"), py::arg("data"), py::arg("config") = py::none(), py::arg("seed") = 1,
          "Applies a plan such as {'technique': 'layer-prune', 'n_drop': 2}; fine-tuning follows config.")
      .def("save", [](const Model& self, const std::filesystem::path& path) { save_checkpoint(self, path); },
           py::arg("path"));

  m.def(
      "load",
      [](const std::filesystem::path& path) { return load_checkpoint<float>(path); }, py::arg("path"));

  m.def(
      "train",
      [](const Splits& data, const py::object& overrides, std::uint64_t seed) {
        const auto cfg = config_from(overrides);
        py::gil_scoped_release release;
        return train_baseline<float>(cfg, data, seed);
      },
      py::arg("data"), py::arg("config") = py::none(), py::arg("seed") = 1,
      "Trains a baseline; `config` is merged over default_config().");
}
