#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "gemlab/cli.hpp"
#include "gemlab/errors.hpp"
#include "gemlab/model.hpp"
#include "gemlab/profile.hpp"
#include "gemlab/scene.hpp"
#include "gemlab/training.hpp"

namespace py = pybind11;
using namespace gemlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Array out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array to_array(const Tensor& t) {
  const auto data = t.data();
  return to_array(std::vector<double>(data.begin(), data.end()), t.rows(), t.cols());
}

PointCloud make_cloud(Array coords, Array feats, std::optional<LabelArray> labels, std::size_t num_classes) {
  if (coords.ndim() != 2 || coords.shape(1) != 3) throw DimensionError("coords must be n x 3");
  if (feats.ndim() != 2 || feats.shape(0) != coords.shape(0)) throw DimensionError("feats must be n x c");
  PointCloud c;
  c.coords.assign(coords.data(), coords.data() + coords.size());
  c.feats.assign(feats.data(), feats.data() + feats.size());
  c.channels = static_cast<std::size_t>(feats.shape(1));
  if (labels) c.labels.assign(labels->data(), labels->data() + labels->size());
  c.num_classes = num_classes;
  c.validate();
  return c;
}

SceneSpec preset(const std::string& name, std::size_t points) {
  if (name == "source") return points ? source_scene_spec(points) : source_scene_spec();
  if (name == "target") return points ? target_scene_spec(points) : target_scene_spec();
  throw ConfigError("unknown preset '" + name + "' (expected source or target)");
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["miou"] = m.miou;
  d["macc"] = m.macc;
  d["allacc"] = m.allacc;
  return d;
}

py::dict record_dict(const RunRecord& r) {
  py::dict d;
  d["phase"] = r.phase;
  d["method"] = r.method;
  d["config_hash"] = r.config_hash;
  d["trainable"] = r.trainable;
  d["total"] = r.total;
  py::list losses;
  for (const auto& e : r.epochs) losses.append(e.loss);
  d["losses"] = losses;
  if (auto m = r.final_metrics()) d["metrics"] = metrics_dict(*m);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point-cloud transformer with parameter-efficient fine-tuning";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto argument = py::register_exception<ArgumentError>(m, "ArgumentError", error.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", argument.ptr());
  py::register_exception<RangeError>(m, "RangeError", argument.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<DataError>(m, "DataError", error.ptr());
  py::register_exception<InfeasibleError>(m, "InfeasibleError", error.ptr());
  auto contract = py::register_exception<ContractError>(m, "ContractError", error.ptr());
  py::register_exception<FreezeViolation>(m, "FreezeViolation", contract.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());

  py::class_<PointCloud>(m, "PointCloud")
      .def(py::init(&make_cloud), py::arg("coords"), py::arg("feats"), py::arg("labels") = py::none(),
           py::arg("num_classes") = 0)
      .def("__len__", &PointCloud::size)
      .def_property_readonly("coords", [](const PointCloud& c) { return to_array(c.coords, c.size(), 3); })
      .def_property_readonly("feats", [](const PointCloud& c) { return to_array(c.feats, c.size(), c.channels); })
      .def_property_readonly("labels", [](const PointCloud& c) { return py::array_t<int>(c.labels.size(), c.labels.data()); })
      .def_readonly("num_classes", &PointCloud::num_classes);

  m.def("generate_scene", [](std::uint64_t seed, const std::string& name, std::size_t points) {
    return generate_scene(seed, preset(name, points));
  }, py::arg("seed"), py::arg("preset") = "source", py::arg("points_per_class") = 0);
  m.def("generate_dataset", [](const std::string& name, std::size_t count, std::uint64_t seed, std::size_t points) {
    return generate_dataset(preset(name, points), count, seed).clouds;
  }, py::arg("preset"), py::arg("count"), py::arg("seed"), py::arg("points_per_class") = 0);

  py::class_<BackboneConfig>(m, "BackboneConfig")
      .def(py::init<>())
      .def_readwrite("in_channels", &BackboneConfig::in_channels)
      .def_readwrite("width", &BackboneConfig::width)
      .def_readwrite("blocks", &BackboneConfig::blocks)
      .def_readwrite("heads", &BackboneConfig::heads)
      .def_readwrite("patch", &BackboneConfig::patch)
      .def_readwrite("ffn_mult", &BackboneConfig::ffn_mult)
      .def_readwrite("classes", &BackboneConfig::classes)
      .def_readwrite("stage_blocks", &BackboneConfig::stage_blocks)
      .def_readwrite("grid_size", &BackboneConfig::grid_size)
      .def_readwrite("voxel_size", &BackboneConfig::voxel_size)
      .def("validate", &BackboneConfig::validate);

  py::class_<PeftConfig>(m, "PeftConfig")
      .def(py::init([](const std::string& method, std::size_t rank, std::size_t tokens, const std::string& sharing) {
             PeftConfig c;
             c.method = parse_method(method);
             c.rank = rank;
             c.tokens = tokens;
             c.sharing = parse_sharing(sharing);
             return c;
           }),
           py::arg("method") = "gem", py::arg("rank") = 8, py::arg("tokens") = 4, py::arg("sharing") = "global")
      .def_property_readonly("method", [](const PeftConfig& c) { return method_name(c.method); })
      .def_readonly("rank", &PeftConfig::rank)
      .def_readonly("tokens", &PeftConfig::tokens)
      .def_property_readonly("sharing", [](const PeftConfig& c) { return sharing_name(c.sharing); });

  m.def("methods", [] {
    std::vector<std::string> out;
    for (Method x : all_methods()) out.push_back(method_name(x));
    return out;
  });

  m.def("count_params", [](const BackboneConfig& b, const PeftConfig& p) {
    auto c = count_params(b, p);
    return py::make_tuple(c.trainable, c.total);
  }, py::arg("backbone"), py::arg("peft"));

  m.def("budget_fit", [](const std::string& method, double fraction, const BackboneConfig& b) {
    auto fit = budget_fit(parse_method(method), Budget{fraction, std::nullopt}, b);
    return py::make_tuple(fit.config, fit.counts.trainable, fit.counts.total);
  }, py::arg("method"), py::arg("fraction"), py::arg("backbone"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("eval_every", &TrainConfig::eval_every)
      .def_property("optimizer", [](const TrainConfig& t) { return optimizer_name(t.optimizer); },
                    [](TrainConfig& t, const std::string& s) { t.optimizer = parse_optimizer(s); })
      .def_property("schedule", [](const TrainConfig& t) { return schedule_name(t.schedule); },
                    [](TrainConfig& t, const std::string& s) { t.schedule = parse_schedule(s); });

  py::class_<Model>(m, "Model")
      .def_static("initialized", &Model::initialized, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_backbone(path).first; })
      .def("save", [](const Model& self, const std::string& path) { save_backbone(path, self); })
      .def("attach", &Model::attach, py::arg("peft"), py::arg("seed") = 0)
      .def("clone", &Model::clone)
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("method", [](const Model& self) -> std::optional<std::string> {
        if (auto x = self.method()) return method_name(*x);
        return std::nullopt;
      })
      .def_property_readonly("trainable_count", [](const Model& self) { return self.params().trainable_count(); })
      .def_property_readonly("total_count", [](const Model& self) { return self.params().total_count(); })
      .def("parameter_names", [](const Model& self, const std::string& prefix) { return self.params().names(prefix); },
           py::arg("prefix") = "")
      .def("parameter", [](const Model& self, const std::string& name) {
        const auto& t = self.params().get(name);
        const auto data = t.data();
        Array out(t.numel());
        std::copy(data.begin(), data.end(), out.mutable_data());
        return out;
      })
      .def("logits", [](const Model& self, const PointCloud& cloud) {
        return to_array(self.forward(self.prepare(cloud)).logits);
      })
      .def("predict", [](const Model& self, const PointCloud& cloud) {
        return predict(self.forward(self.prepare(cloud)).logits);
      });

  m.def("pretrain", [](Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg) {
    RunRecord rec;
    {
      py::gil_scoped_release release;
      rec = pretrain(model, train, cfg);
    }
    return record_dict(rec);
  }, py::arg("model"), py::arg("train"), py::arg("config"));
  m.def("finetune", [](Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg) {
    RunRecord rec;
    {
      py::gil_scoped_release release;
      rec = finetune(model, train, cfg);
    }
    return record_dict(rec);
  }, py::arg("model"), py::arg("train"), py::arg("config"));
  m.def("evaluate", [](const Model& model, const std::vector<PointCloud>& clouds) {
    return metrics_dict(evaluate(model, clouds));
  }, py::arg("model"), py::arg("clouds"));
  m.def("confusion_metrics", [](const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
    if (truth.size() != predicted.size()) throw DimensionError("truth and predictions differ in length");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return metrics_dict(cm.metrics());
  }, py::arg("truth"), py::arg("predicted"), py::arg("classes"));

  m.def("count_ops", [](const Model& model, const PointCloud& cloud) { return count_pass(model, cloud).tallies(); },
        py::arg("model"), py::arg("cloud"));
  m.def("latent_attention", [](const Model& model, const PointCloud& cloud) {
    auto dump = capture_attention(model, cloud);
    py::list out;
    for (const auto& mtx : dump.latent_to_points) out.append(to_array(mtx.weights, mtx.rows, mtx.cols));
    return out;
  }, py::arg("model"), py::arg("cloud"));
  m.def("js_divergence", &js_divergence, py::arg("p"), py::arg("q"));

  m.def("cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "gemlab");
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"));
}
