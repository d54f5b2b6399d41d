#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "einmemo/canvas.hpp"
#include "einmemo/dataset.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/evaluation.hpp"
#include "einmemo/prompt.hpp"
#include "einmemo/retrieval.hpp"
#include "einmemo/toy_inpainter.hpp"
#include "einmemo/training.hpp"

namespace py = pybind11;
using namespace einmemo;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const F64Array& a) {
  if (a.ndim() != 3) throw UsageError("expected an image array of shape (C, H, W)");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), img.data().begin());
  return img;
}

F64Array from_image(const Image& img) {
  F64Array a({img.channels(), img.height(), img.width()});
  std::copy(img.data().begin(), img.data().end(), a.mutable_data());
  return a;
}

Mask to_mask(const U8Array& a) {
  if (a.ndim() != 2) throw UsageError("expected a mask array of shape (H, W)");
  Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

U8Array from_mask(const Mask& m) {
  U8Array a({m.height(), m.width()});
  std::copy(m.data().begin(), m.data().end(), a.mutable_data());
  return a;
}

nlohmann::json to_json(const py::dict& d) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(d).cast<std::string>());
}

// Partial configs are merged over the defaults.
template <typename Config>
Config config_from(const py::dict& d) {
  nlohmann::json j = Config{};
  j.merge_patch(to_json(d));
  return j.get<Config>();
}

py::dict to_dict(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump()).cast<py::dict>();
}

// Retrieval features by name; the toy-encoder extractor borrows the model.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name, const PatchVqInpainter* model) {
  if (name == "pixels") return std::make_unique<PixelExtractor>();
  if (name == "toy-encoder") {
    if (!model) throw UsageError("the toy-encoder extractor needs a model");
    return std::make_unique<ToyEncoderExtractor>(*model);
  }
  throw UsageError("unknown extractor '" + name + "'");
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["label"] = r.label;
  d["mean"] = r.mean;
  d["per_fold"] = r.per_fold;
  d["per_category"] = r.per_category;
  py::list queries;
  for (const auto& q : r.queries) {
    py::dict e;
    e["query_id"] = q.query_id;
    e["pair_id"] = q.pair_id;
    e["category_id"] = q.category_id;
    e["iou"] = q.iou;
    queries.append(e);
  }
  d["queries"] = queries;
  d["metadata"] = r.metadata;
  return d;
}

}  // namespace

PYBIND11_MODULE(_einmemo, m) {
  m.doc() = "Learnable border prompts for visual in-context learning";

  static py::exception<Error> base_error(m, "Error");
  static py::exception<UsageError> usage_error(m, "UsageError", base_error.ptr());
  static py::exception<DataError> data_error(m, "DataError", base_error.ptr());
  static py::exception<NumericalError> numerical_error(m, "NumericalError", base_error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const UsageError& e) {
      usage_error(e.what());
    } catch (const DataError& e) {
      data_error(e.what());
    } catch (const NumericalError& e) {
      numerical_error(e.what());
    }
  });

  // Geometry and metrics.
  m.def("param_count", &einmemo::param_count, py::arg("pad"), py::arg("region_h"), py::arg("region_w"));
  m.def(
      "masked_token_indices",
      [](int side, int cell, int gap) { return masked_token_indices(CanvasSpec{cell, cell, gap, 0.0}, side); },
      py::arg("grid_side") = 14, py::arg("cell") = 111, py::arg("gap") = 2);
  m.def(
      "compose_canvas",
      [](const F64Array& a, const F64Array& b, const F64Array& q, int gap) {
        const Image qi = to_image(q);
        return from_image(compose_canvas(to_image(a), to_image(b), qi, CanvasSpec{qi.height(), qi.width(), gap, 0.0}).pixels);
      },
      py::arg("pair_image"), py::arg("pair_label"), py::arg("query"), py::arg("gap") = 2);
  m.def(
      "iou", [](const U8Array& a, const U8Array& b) { return iou(to_mask(a), to_mask(b)); }, py::arg("a"),
      py::arg("b"));
  m.def(
      "binarize", [](const F64Array& img) { return from_mask(binarize(to_image(img))); }, py::arg("decoded"));

  // Datasets.
  py::class_<TaskDataset>(m, "TaskDataset")
      .def("__len__", &TaskDataset::size)
      .def_property_readonly("ids",
                             [](const TaskDataset& d) {
                               std::vector<std::string> ids;
                               for (const auto& s : d.samples()) ids.push_back(s->id);
                               return ids;
                             })
      .def_property_readonly("categories", &TaskDataset::categories)
      .def("image", [](const TaskDataset& d, size_t i) { return from_image(d[i].image); })
      .def("mask", [](const TaskDataset& d, size_t i) { return from_mask(d[i].mask); })
      .def("category", [](const TaskDataset& d, size_t i) { return d[i].category_id; });

  m.def(
      "synth_task",
      [](uint64_t seed, int categories, int per_class, int cell, int test_per_class, double texture_contrast,
         double texture_scale) {
        SynthTask t = synth_task(seed, categories, per_class, cell,
                                 SynthOptions{test_per_class, texture_contrast, texture_scale});
        return py::make_tuple(t.train, t.test);
      },
      py::arg("seed") = 0, py::arg("categories") = 8, py::arg("per_class") = 50, py::arg("cell") = 111,
      py::arg("test_per_class") = -1, py::arg("texture_contrast") = 1.0, py::arg("texture_scale") = 1.0,
      "Returns (train, test) synthetic datasets.");
  m.def(
      "load_pairs",
      [](const std::filesystem::path& root, const std::filesystem::path& manifest, const std::string& split,
         int cell) { return load_pairs(root, manifest, parse_split(split), cell); },
      py::arg("root"), py::arg("manifest"), py::arg("split") = "train", py::arg("cell") = 111);
  m.def(
      "write_dataset",
      [](const TaskDataset& train, const TaskDataset& test, const std::filesystem::path& root) {
        write_dataset({&train, &test}, root);
      },
      py::arg("train"), py::arg("test"), py::arg("root"));

  // Frozen model.
  py::class_<PatchVqInpainter>(m, "ToyModel")
      .def_property_readonly("digest", [](const PatchVqInpainter& mdl) { return to_hex(mdl.weight_digest()); })
      .def_property_readonly("grid_side", &PatchVqInpainter::token_grid_side)
      .def_property_readonly("codebook_size", [](const PatchVqInpainter& mdl) { return mdl.codebook().size; })
      .def("save", [](const PatchVqInpainter& mdl, const std::filesystem::path& dir) { save_model(mdl, dir); })
      .def_static("load", [](const std::filesystem::path& dir) { return load_model(dir); });

  m.def(
      "train_toy_frozen",
      [](const TaskDataset& train, const py::dict& config) {
        const ToyTrainConfig cfg = config_from<ToyTrainConfig>(config);
        py::gil_scoped_release release;
        return train_toy_frozen(train, cfg);
      },
      py::arg("train"), py::arg("config") = py::dict(),
      "Trains the toy frozen inpainter; config keys follow the JSON training config.");
  m.def("default_toy_config", [] { return to_dict(nlohmann::json(ToyTrainConfig{})); });
  m.def("default_prompt_config", [] { return to_dict(nlohmann::json(PromptTrainConfig{})); });

  // Prompts.
  py::class_<BorderPrompt>(m, "BorderPrompt")
      .def_property_readonly("values",
                             [](const BorderPrompt& p) {
                               py::array_t<float> a(static_cast<py::ssize_t>(p.values.size()));
                               std::copy(p.values.begin(), p.values.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("pad", [](const BorderPrompt& p) { return p.geometry.pad; })
      .def_property_readonly("variant", [](const BorderPrompt& p) { return std::string(to_string(p.variant)); })
      .def_property_readonly("param_count", [](const BorderPrompt& p) { return p.geometry.param_count(); })
      .def_property_readonly("checksum", &prompt_checksum)
      .def("frame", [](const BorderPrompt& p) { return from_image(materialize(p)); })
      .def("save", [](const BorderPrompt& p, const std::filesystem::path& path) { save_checkpoint(p, {}, path); })
      .def_static("load", [](const std::filesystem::path& path) { return load_checkpoint(path).first; });

  m.def(
      "init_prompt",
      [](const std::string& variant, int pad, const std::string& init, uint64_t seed) {
        return init_prompt(CanvasSpec{}, parse_placement(variant), pad,
                           init == "gaussian" ? PromptInit::gaussian : PromptInit::zeros, seed);
      },
      py::arg("variant") = "IL", py::arg("pad") = 15, py::arg("init") = "zeros", py::arg("seed") = 0);

  m.def(
      "train_prompt",
      [](const TaskDataset& train, const PatchVqInpainter& model, const py::dict& config, const std::string& extractor) {
        const PromptTrainConfig cfg = config_from<PromptTrainConfig>(config);
        const auto fx = make_extractor(extractor, &model);
        TrainResult r;
        {
          py::gil_scoped_release release;
          const RetrievalIndex index = build_index(train, *fx);
          r = train_prompt(train, model, index, *fx, cfg);
        }
        py::list history;
        for (const auto& e : r.history.epochs) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["loss"] = e.mean_loss;
          d["lr"] = e.learning_rate;
          history.append(d);
        }
        return py::make_tuple(r.prompt, history);
      },
      py::arg("train"), py::arg("model"), py::arg("config") = py::dict(), py::arg("extractor") = "pixels",
      "Trains a border prompt with the model frozen; returns (prompt, per-epoch history).");

  m.def(
      "eval_icl",
      [](const TaskDataset& queries, const TaskDataset& retrieval_set, const PatchVqInpainter& model,
         const BorderPrompt* prompt, const std::string& extractor, bool exclude_self) {
        const auto fx = make_extractor(extractor, &model);
        EvalReport r;
        {
          py::gil_scoped_release release;
          const RetrievalIndex index = build_index(retrieval_set, *fx);
          EvalOptions opt;
          opt.exclude_self = exclude_self;
          opt.label = prompt ? "prompt" : "baseline";
          r = eval_icl(queries, retrieval_set, index, model, *fx, prompt, opt);
        }
        return report_dict(r);
      },
      py::arg("queries"), py::arg("retrieval_set"), py::arg("model"), py::arg("prompt") = nullptr,
      py::arg("extractor") = "pixels", py::arg("exclude_self") = true);

  m.def(
      "grad_check",
      [](const PatchVqInpainter& model, const TaskDataset& ds, const BorderPrompt& prompt, int n_params, double eps,
         uint64_t seed) {
        PixelExtractor fx;
        const RetrievalIndex index = build_index(ds, fx);
        return grad_check(model, ds, index, fx, prompt, n_params, eps, seed);
      },
      py::arg("model"), py::arg("ds"), py::arg("prompt"), py::arg("n_params") = 32, py::arg("eps") = 1e-4,
      py::arg("seed") = 0);
}
