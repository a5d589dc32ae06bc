#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "wsseg/app.hpp"

namespace py = pybind11;
using namespace wsseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<int32_t, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor(s, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> out(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Mask to_mask(const I32& a) {
  if (a.ndim() != 2) throw ValidationError("masks must be 2-D");
  Mask m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.labels.begin());
  return m;
}

py::array_t<int32_t> mask_to_numpy(const Mask& m) {
  py::array_t<int32_t> out({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

RgbImage to_rgb(const U8& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("images must be H x W x 3 uint8");
  RgbImage img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

Json parse_json(const std::string& text) { return text.empty() ? Json::object() : Json::parse(text); }

CommandOptions command_options(const py::kwargs& kw) {
  CommandOptions o;
  for (const auto& [k, v] : kw) {
    const std::string key = py::str(k);
    if (v.is_none()) continue;
    if (key == "config") o.config_path = v.cast<std::string>();
    else if (key == "overrides") o.overrides = v.cast<std::vector<std::string>>();
    else if (key == "seed") o.seed = v.cast<uint64_t>();
    else if (key == "crf") o.crf = v.cast<bool>();
    else if (key == "out") o.out = v.cast<std::string>();
    else if (key == "ckpt") o.ckpt = v.cast<std::string>();
    else if (key == "input") o.input = v.cast<std::string>();
    else if (key == "pred") o.pred_dir = v.cast<std::string>();
    else if (key == "gt") o.gt_dir = v.cast<std::string>();
    else if (key == "split") o.split = v.cast<std::string>();
    else if (key == "resume") o.resume = v.cast<std::string>();
    else if (key == "sweeps") o.sweeps = v.cast<std::vector<std::string>>();
    else if (key == "save_scores") o.save_scores = v.cast<bool>();
    else throw ConfigError("unknown option " + key);
  }
  return o;
}

template <typename Cmd>
py::object run_command(Cmd cmd, const py::kwargs& kw) {
  const CommandOptions o = command_options(kw);
  std::ostringstream log;
  {
    py::gil_scoped_release release;
    cmd(o, log);
  }
  return py::str(log.str());
}

}  // namespace

PYBIND11_MODULE(_wsseg, m) {
  m.doc() = "Prototype-based weakly supervised segmentation core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def("default_config_json", [] { return default_config().dump(); });
  m.def("resolve_config_json", [](const std::string& user) {
    return merge_config(default_config(), parse_json(user)).dump();
  });

  m.def("softmax_channels", [](const F64& s) { return to_numpy(softmax_channels(to_tensor(s))); });
  m.def(
      "crf_refine",
      [](const U8& image, const F64& probs, const std::string& params_json, bool brute_force) {
        const Json cfg = merge_config(default_config(), Json{{"crf", parse_json(params_json)}});
        return mask_to_numpy(crf_refine(to_rgb(image), to_tensor(probs), crf_params(cfg),
                                        brute_force ? CrfMethod::kBruteForce : CrfMethod::kFast));
      },
      py::arg("image"), py::arg("probs"), py::arg("params_json") = "", py::arg("brute_force") = false);

  m.def(
      "confusion",
      [](const I32& pred, const I32& gt, int64_t num_classes, int32_t ignore_index) {
        const ConfusionCounts c = accumulate(to_mask(pred), to_mask(gt), num_classes, ignore_index);
        return py::dict(py::arg("tp") = c.tp, py::arg("fp") = c.fp, py::arg("fn") = c.fn);
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"), py::arg("ignore_index") = -1);
  m.def(
      "iou_dice",
      [](const I32& pred, const I32& gt, int64_t num_classes, int32_t ignore_index) {
        const SegmentationScores s = iou_dice(accumulate(to_mask(pred), to_mask(gt), num_classes, ignore_index));
        return py::dict(py::arg("iou") = s.iou, py::arg("dice") = s.dice, py::arg("miou") = s.miou,
                        py::arg("mdice") = s.mdice);
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"), py::arg("ignore_index") = -1);
  m.def("roc_auc", [](const std::vector<double>& pos, const std::vector<double>& neg) { return roc_auc(pos, neg); });

  m.def(
      "synth_dataset",
      [](const std::string& root, int64_t train, int64_t val, int64_t test, int64_t side, uint64_t seed) {
        generate_blob_dataset(root, SynthConfig{train, val, test, side, seed});
      },
      py::arg("root"), py::arg("train") = 8, py::arg("val") = 4, py::arg("test") = 4, py::arg("side") = 224,
      py::arg("seed") = 7);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config_json) {
             return build_model(merge_config(default_config(), parse_json(config_json)));
           }),
           py::arg("config_json") = "")
      .def_property_readonly("class_names", &Model::class_names)
      .def_property_readonly("image_side", [](const Model& md) { return md.encoder().spec().image_side(); })
      .def("load", [](const Model& md, const std::string& path, bool best) {
             apply_checkpoint(md, load_checkpoint(path), best);
           },
           py::arg("path"), py::arg("best") = true)
      .def("class_scores",
           [](const Model& md, const F64& images) {
             const Tensor x = to_tensor(images);
             Tensor out;
             {
               py::gil_scoped_release release;
               out = md.class_score_maps(x);
             }
             return to_numpy(out);
           })
      .def("pyramid_shapes", [](const Model& md, const F64& images) {
        ag::NoGradGuard guard;
        const ForwardOutput f = md.forward(to_tensor(images));
        std::vector<Shape> shapes;
        for (const ag::Var& v : f.pyramid) shapes.push_back(v->shape());
        return shapes;
      })
      .def("bank_size", [](const Model& md) {
        ag::NoGradGuard guard;
        return md.current_bank().size();
      });

  m.def("train", [](const py::kwargs& kw) { return run_command(cmd_train, kw); });
  m.def("infer", [](const py::kwargs& kw) { return run_command(cmd_infer, kw); });
  m.def("evaluate", [](const py::kwargs& kw) { return run_command(cmd_eval, kw); });
  m.def("diagnose", [](const py::kwargs& kw) { return run_command(cmd_diagnose, kw); });
  m.def("visualize", [](const py::kwargs& kw) { return run_command(cmd_visualize, kw); });
}
