#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "finemine/augment.hpp"
#include "finemine/error.hpp"
#include "finemine/fusion.hpp"
#include "finemine/harness.hpp"
#include "finemine/mining.hpp"
#include "finemine/parallel.hpp"
#include "finemine/synth_data.hpp"
#include "finemine/tinymodel.hpp"

namespace py = pybind11;
using namespace finemine;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Images cross the boundary as H x W x C float32 arrays.
Image to_image(const FloatArray& a) {
  if (a.ndim() != 3) throw ValidationError("image array must be H x W x C");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::memcpy(img.pixels.data(), a.data(), img.pixels.size() * sizeof(float));
  return img;
}

FloatArray to_array(const Image& img) {
  FloatArray a({img.height, img.width, img.channels});
  std::memcpy(a.mutable_data(), img.pixels.data(), img.pixels.size() * sizeof(float));
  return a;
}

std::vector<std::vector<double>> rows_of(const DoubleArray& a) {
  if (a.ndim() != 2) throw ValidationError("logits must be a 2-D array");
  std::vector<std::vector<double>> rows(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) rows[i].assign(a.data(i, 0), a.data(i, 0) + a.shape(1));
  return rows;
}

py::list views_of(const augment::ViewSet& v) {
  py::list out;
  for (const auto& img : v.views) out.append(to_array(img));
  return out;
}

py::dict report_dict(const harness::MetricsReport& r) {
  return py::module_::import("json").attr("loads")(harness::to_json(r).dump());
}

}  // namespace

PYBIND11_MODULE(_finemine, m) {
  m.doc() = "Pseudo-label mining and shot-routed fusion on synthetic fine-grained data";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));

  py::enum_<synth::Shot>(m, "Shot")
      .value("LONG", synth::Shot::Long)
      .value("MEDIUM", synth::Shot::Medium)
      .value("CLOSE", synth::Shot::Close);

  py::class_<synth::Example>(m, "Example")
      .def_readonly("id", &synth::Example::id)
      .def_readonly("label", &synth::Example::label)
      .def_readonly("hidden_label", &synth::Example::hidden_label)
      .def_readonly("shot", &synth::Example::shot)
      .def_readonly("target_area_ratio", &synth::Example::target_area_ratio)
      .def_property_readonly("image", [](const synth::Example& e) { return to_array(e.image); });

  py::class_<synth::DatasetBundle>(m, "DatasetBundle")
      .def_readonly("num_inclass_classes", &synth::DatasetBundle::num_inclass_classes)
      .def_readonly("num_outclass_classes", &synth::DatasetBundle::num_outclass_classes)
      .def("split", py::overload_cast<std::string_view>(&synth::DatasetBundle::split, py::const_),
           py::return_value_policy::reference_internal)
      .def("save", [](const synth::DatasetBundle& b, const std::filesystem::path& p) { synth::save_bundle(b, p); })
      .def("__eq__", [](const synth::DatasetBundle& a, const synth::DatasetBundle& b) { return a == b; });

  // Generation takes the JSON form of the gen section so defaults and
  // validation match the CLI.
  m.def(
      "generate",
      [](const std::string& gen_json) {
        return synth::generate(json_io::gen_spec_from_json(json_io::json::parse(gen_json), "gen"));
      },
      py::arg("gen_json") = "{}");
  m.def("load_bundle", &synth::load_bundle, py::arg("path"));
  m.def("imbalanced_counts", &synth::imbalanced_counts, py::arg("num_classes"), py::arg("total"), py::arg("exponent"));

  py::class_<nn::Classifier>(m, "Classifier")
      .def_property_readonly("num_classes", &nn::Classifier::num_classes)
      .def_readwrite("input_resolution", &nn::Classifier::input_resolution)
      .def_property_readonly("params",
                             [](const nn::Classifier& c) {
                               const auto p = c.params();
                               return FloatArray(static_cast<py::ssize_t>(p.size()), p.data());
                             })
      .def("save", [](const nn::Classifier& c, const std::filesystem::path& p) { nn::save_checkpoint(c, p); })
      .def("__eq__", [](const nn::Classifier& a, const nn::Classifier& b) { return a == b; });

  m.def("init_classifier", &nn::init, py::arg("num_classes"), py::arg("seed"));
  m.def("load_checkpoint", &nn::load_checkpoint, py::arg("path"));
  m.def(
      "forward", [](const nn::Classifier& c, const FloatArray& img, int r) { return nn::forward(c, to_image(img), r).logits; },
      py::arg("model"), py::arg("image"), py::arg("resolution"));
  m.def(
      "predict", [](const nn::Classifier& c, const FloatArray& img) { return nn::predict(c, to_image(img)); },
      py::arg("model"), py::arg("image"));
  m.def(
      "attention",
      [](const nn::Classifier& c, const FloatArray& img, int r) {
        const auto a = nn::attention(c, to_image(img), r);
        DoubleArray out({a.height, a.width});
        std::memcpy(out.mutable_data(), a.values.data(), a.values.size() * sizeof(double));
        return out;
      },
      py::arg("model"), py::arg("image"), py::arg("resolution"));
  m.def(
      "grad_check",
      [](const nn::Classifier& c, const FloatArray& img, const std::vector<double>& target, double eps) {
        return nn::grad_check(c, to_image(img), target, eps);
      },
      py::arg("model"), py::arg("image"), py::arg("target"), py::arg("epsilon") = 1e-4);
  m.def("softmax", [](const std::vector<double>& z) { return nn::softmax(z); });
  m.def(
      "train_on_labeled",
      [](const synth::DatasetBundle& b, const std::string& train_json, std::uint64_t seed) {
        auto cfg = json_io::train_config_from_json(json_io::json::parse(train_json), "train");
        cfg.seed = seed;
        const auto items = mining::training_items(b, {}, cfg.label_smooth_eps);
        py::gil_scoped_release release;
        return nn::train(nn::init(b.num_inclass_classes, seed), items, cfg).model;
      },
      py::arg("bundle"), py::arg("train_json") = "{}", py::arg("seed") = 0);
  m.def(
      "accuracy", [](const nn::Classifier& c, const synth::DatasetBundle& b, std::string_view split) {
        return mining::accuracy(c, b.split(split));
      },
      py::arg("model"), py::arg("bundle"), py::arg("split") = "validation");

  auto aug = m.def_submodule("augment", "Training-time and test-time views");
  aug.def(
      "cutmix",
      [](const FloatArray& a, const std::vector<double>& ta, const FloatArray& b, const std::vector<double>& tb,
         double alpha, std::uint64_t seed) {
        const auto r = augment::cutmix(to_image(a), ta, to_image(b), tb, alpha, seed);
        return py::make_tuple(to_array(r.image), r.target, r.lam);
      },
      py::arg("a"), py::arg("target_a"), py::arg("b"), py::arg("target_b"), py::arg("alpha"), py::arg("seed"));
  aug.def(
      "rcm_permutation", [](int n, int k, std::uint64_t seed) { return augment::rcm_permutation(n, k, seed).mapping; },
      py::arg("grid_n"), py::arg("jitter_k"), py::arg("seed"));
  aug.def(
      "tta_three",
      [](const FloatArray& img, int resize_to, int crop, std::uint64_t seed) {
        return views_of(augment::tta_three(to_image(img), resize_to, crop, seed));
      },
      py::arg("image"), py::arg("resize_to"), py::arg("crop"), py::arg("seed"));
  aug.def(
      "crops_144",
      [](const FloatArray& img, const std::array<int, 4>& scales, int crop) {
        return views_of(augment::crops_144(to_image(img), scales, crop));
      },
      py::arg("image"), py::arg("scales"), py::arg("crop"));

  auto mine = m.def_submodule("mining", "Voting, k-means and pseudo-label sets");
  mine.def(
      "vote_top1",
      [](const std::vector<std::pair<int, double>>& votes) {
        std::vector<mining::Vote> v;
        for (const auto& [label, conf] : votes) v.push_back({label, conf});
        const auto r = mining::vote_top1(v);
        return py::make_tuple(r.label, r.agreement, r.mean_confidence);
      },
      py::arg("votes"));
  mine.def(
      "kmeans",
      [](const DoubleArray& points, int k, int max_iters, std::uint64_t seed, int restarts) {
        if (points.ndim() != 2) throw ValidationError("points must be a 2-D array");
        mining::Matrix x{static_cast<std::size_t>(points.shape(0)), static_cast<std::size_t>(points.shape(1)),
                         std::vector<double>(points.data(), points.data() + points.size())};
        const auto r = mining::kmeans(x, k, max_iters, seed, restarts);
        DoubleArray centroids({r.model.centroids.rows, r.model.centroids.cols});
        std::memcpy(centroids.mutable_data(), r.model.centroids.data.data(), r.model.centroids.data.size() * sizeof(double));
        return py::make_tuple(r.assignments, centroids, r.model.inertia);
      },
      py::arg("points"), py::arg("k"), py::arg("max_iters") = 100, py::arg("seed") = 0, py::arg("restarts") = 5);
  mine.def(
      "load_pseudo_labels",
      [](const std::filesystem::path& p) {
        std::vector<py::tuple> rows;
        for (const auto& [id, e] : mining::load_pseudo_labels(p).entries)
          rows.push_back(py::make_tuple(id, e.label, e.confidence, e.agreement, e.round));
        return rows;
      },
      py::arg("path"));

  auto fus = m.def_submodule("fusion", "Logit fusion and shot routing");
  fus.def(
      "fuse",
      [](const DoubleArray& logits, const std::vector<double>& weights) {
        return fusion::fuse(rows_of(logits), weights);
      },
      py::arg("logits"), py::arg("weights"));
  fus.def("weights_from_accuracy", [](const std::vector<double>& acc) { return fusion::weights_from_accuracy(acc); });
  fus.def(
      "classify_shot", [](double area) { return fusion::classify_shot(area, fusion::FusionPlan{}); },
      py::arg("area_ratio"));
  fus.def(
      "routed_fuse",
      [](const std::vector<double>& g, const std::vector<double>& f, synth::Shot shot) {
        return fusion::routed_fuse(g, f, shot, fusion::FusionPlan{});
      },
      py::arg("z_generic"), py::arg("z_finegrained"), py::arg("shot"));

  m.def("default_config", [] { return harness::to_json(harness::default_run_config()).dump(2); });
  m.def(
      "run_pipeline",
      [](const std::string& config_json, std::optional<std::uint64_t> seed) {
        auto cfg = harness::run_config_from_json(json_io::json::parse(config_json));
        if (seed) harness::override_seeds(cfg, *seed);
        harness::MetricsReport r;
        {
          py::gil_scoped_release release;
          r = harness::run_pipeline(cfg);
        }
        return report_dict(r);
      },
      py::arg("config_json"), py::arg("seed") = py::none());
  m.def(
      "format_report",
      [](const std::filesystem::path& run_dir, const std::string& format) {
        const auto j = json_io::json::parse(read_file(run_dir / "report.json"));
        return harness::format_report(harness::report_from_json(j), harness::report_format_from_string(format));
      },
      py::arg("run_dir"), py::arg("format") = "table");
}
