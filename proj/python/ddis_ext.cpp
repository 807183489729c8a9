// Python bindings: thin wrappers that move tensors in and out as numpy arrays.
#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ddis/checkpoint.hpp"
#include "ddis/cli.hpp"
#include "ddis/experiments.hpp"
#include "ddis/guidance.hpp"

namespace py = pybind11;
using namespace ddis;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<std::int64_t> labels_numpy(const std::vector<std::int64_t>& v) {
  py::array_t<std::int64_t> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// A loaded fixture checkpoint.
struct Bundle {
  FixtureBundle fb;
  explicit Bundle(const std::string& path) : fb(bundle_from_checkpoint(load_checkpoint(path))) {}

  py::array_t<double> sample(int class_id, std::size_t count, std::uint64_t seed, const std::string& slot0,
                             bool guided) const {
    if (class_id < 0 || class_id >= static_cast<int>(shape_classes().size())) throw py::value_error("class out of range");
    const auto s = make_schedule();
    const auto set = guided ? dag_set(fb, s, DagConfig{}, {class_id}, count, seed, slot0)
                            : unguided_set(fb, s, {class_id}, count, seed, slot0);
    return to_numpy(set.images);
  }

  py::array_t<double> probabilities(const py::array_t<double, py::array::c_style | py::array::forcecast>& images) const {
    return to_numpy(softmax_probabilities(fb.classifier, from_numpy(images)));
  }

  py::array_t<double> features(const py::array_t<double, py::array::c_style | py::array::forcecast>& images) const {
    return to_numpy(penultimate_features(fb.classifier, from_numpy(images)));
  }

  double bn_loss(const py::array_t<double, py::array::c_style | py::array::forcecast>& images) const {
    NoGradGuard guard;
    return image_bn_loss(fb.classifier, from_numpy(images), running_statistics(fb.classifier)).item();
  }
};

}  // namespace

PYBIND11_MODULE(_ddis, m) {
  m.doc() = "Data-free image synthesis engine";

  py::register_exception<Error>(m, "DdisError", PyExc_RuntimeError);

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "ddis");
    py::gil_scoped_release release;
    return run_cli(args);
  }, py::arg("args"), "Run a CLI subcommand in-process; returns the exit code.");

  m.def("shape_classes", &shape_classes);

  m.def("schedule", [](int train_steps, double beta_start, double beta_end, int steps, const std::string& mode) {
    const auto sm = mode == "ddpm" ? SigmaMode::ddpm_matched : SigmaMode::deterministic;
    const auto s = make_schedule(train_steps, beta_start, beta_end, steps, sm);
    py::dict d;
    d["alpha_bar"] = s.alpha_bar;
    d["timesteps"] = s.timesteps;
    d["sigma"] = s.sigma;
    return d;
  }, py::arg("train_steps") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
     py::arg("steps") = 30, py::arg("mode") = "deterministic");

  m.def("generate_dataset", [](const std::string& domain, std::size_t per_class, std::uint64_t seed) {
    const auto d = generate_dataset(parse_domain(domain), per_class, seed);
    return py::make_tuple(to_numpy(d.images), labels_numpy(d.labels));
  }, py::arg("domain"), py::arg("per_class"), py::arg("seed"));

  m.def("frechet_distance", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                               const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
    return frechet_distance(from_numpy(a), from_numpy(b)).distance;
  });

  m.def("oracle_check", [](const std::string& target, std::size_t samples, int steps, std::uint64_t seed) {
    const auto s = make_schedule(1000, 1e-4, 0.02, steps, SigmaMode::deterministic, 1.0);
    const auto mix = target == "gaussian" ? gaussian_oracle(s, 2, seed) : two_class_oracle(s);
    OracleCheckConfig oc;
    oc.samples = samples;
    oc.sample_steps = steps;
    oc.seed = seed;
    const auto r = oracle_sample_check(mix, oc);
    py::dict d;
    d["mean"] = r.mean;
    d["target_mean"] = r.target_mean;
    d["cov"] = r.cov;
    d["target_cov"] = r.target_cov;
    d["mean_ok"] = r.mean_ok;
    d["cov_ok"] = r.cov_ok;
    return d;
  }, py::arg("target") = "mixture", py::arg("samples") = 2000, py::arg("steps") = 30, py::arg("seed") = 1);

  m.def("list_records", [](const std::string& path) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, kind] : list_records(path)) out.emplace_back(name, kind_name(kind));
    return out;
  });

  py::class_<Bundle>(m, "Bundle")
      .def(py::init<const std::string&>(), py::arg("path"))
      .def_property_readonly("manifest", [](const Bundle& b) { return b.fb.manifest.entries; })
      .def("sample", &Bundle::sample, py::arg("class_id"), py::arg("count"), py::arg("seed") = 1,
           py::arg("slot0") = "<pad>", py::arg("guided") = false,
           "Images [n, 1, 16, 16] in classifier range.")
      .def("probabilities", &Bundle::probabilities)
      .def("features", &Bundle::features)
      .def("bn_loss", &Bundle::bn_loss);
}
