#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "casa/checks.hpp"
#include "casa/datagen.hpp"
#include "casa/divergences.hpp"
#include "casa/harness.hpp"
#include "casa/imd.hpp"

namespace py = pybind11;
using namespace casa;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) {
    return Tensor(static_cast<std::size_t>(a.shape(0)), 1,
                  std::vector<double>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() != 2) throw std::invalid_argument("expected a 1-D or 2-D array");
  return Tensor(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

SampleCloud cloud(const Array& points, std::vector<std::size_t> labels = {}) {
  SampleCloud c;
  c.points = to_tensor(points);
  c.labels = std::move(labels);
  return c;
}

TrainConfig config_from(const std::string& kv) {
  return kv.empty() ? TrainConfig{} : TrainConfig::from_kv(kv);
}

}  // namespace

PYBIND11_MODULE(_casa, m) {
  m.doc() = "Conditional support alignment workbench (native core)";

  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<ImdUnbounded>(m, "ImdUnbounded", PyExc_ValueError);

  m.def("default_config", [] { return TrainConfig{}.to_kv(); },
        "Canonical key=value text of the default training config.");
  m.def("config_hash", [](const std::string& kv) { return config_from(kv).hash(); }, py::arg("kv"));
  m.def("normalize_config", [](const std::string& kv) { return config_from(kv).to_kv(); },
        py::arg("kv"), "Parse, validate and re-render a key=value config.");

  m.def(
      "train",
      [](const std::string& kv) {
        TrainConfig cfg = config_from(kv);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(cfg, grid_domains(cfg, cfg.alpha, cfg.seed));
        }
        return run_to_json(r.record);
      },
      py::arg("kv") = "", "Train one run on the synthetic task; returns the run record as JSON.");

  m.def(
      "grid",
      [](const std::string& kv, const std::vector<std::string>& methods,
         const std::vector<std::string>& alphas, const std::vector<std::uint64_t>& seeds,
         std::size_t workers) {
        GridSpec spec;
        spec.base = config_from(kv);
        spec.workers = workers;
        spec.methods.clear();
        for (const auto& s : methods) spec.methods.push_back(parse_method(s));
        spec.alphas.clear();
        for (const auto& s : alphas) spec.alphas.push_back(parse_alpha(s));
        spec.seeds = seeds;
        GridReport rep;
        {
          py::gil_scoped_release release;
          rep = run_grid(spec);
        }
        return grid_csv(rep);
      },
      py::arg("kv"), py::arg("methods"), py::arg("alphas"), py::arg("seeds"),
      py::arg("workers") = 1, "Run a grid; returns the summary CSV text.");

  m.def(
      "per_class_accuracy",
      [](const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
         std::size_t k) { return per_class_accuracy(pred, truth, k); },
      py::arg("pred"), py::arg("truth"), py::arg("num_classes"));

  m.def(
      "target_marginal",
      [](std::optional<double> alpha, std::size_t k, std::uint64_t seed) {
        return sample_target_marginal(LabelShiftSpec{alpha, k, seed});
      },
      py::arg("alpha"), py::arg("num_classes"), py::arg("seed"));
  m.def("largest_remainder_counts", &largest_remainder_counts, py::arg("marginal"), py::arg("n"));

  m.def(
      "ssd", [](const Array& p, const Array& q) { return ssd(cloud(p), cloud(q)); }, py::arg("p"),
      py::arg("q"));
  m.def(
      "cssd",
      [](const Array& p, std::vector<std::size_t> yp, const Array& q, std::vector<std::size_t> yq,
         std::size_t k) { return cssd(cloud(p, std::move(yp)), cloud(q, std::move(yq)), k).value; },
      py::arg("p"), py::arg("p_labels"), py::arg("q"), py::arg("q_labels"), py::arg("num_classes"));
  m.def(
      "joint_ssd",
      [](const Array& p, std::vector<std::size_t> yp, const Array& q, std::vector<std::size_t> yq,
         std::optional<double> scale) {
        const SampleCloud a = cloud(p, std::move(yp)), b = cloud(q, std::move(yq));
        return joint_ssd(a, b, scale ? *scale : default_label_scale(a, b));
      },
      py::arg("p"), py::arg("p_labels"), py::arg("q"), py::arg("q_labels"),
      py::arg("label_scale") = py::none());
  m.def(
      "wasserstein_1", [](const Array& p, const Array& q) { return wasserstein_1(cloud(p), cloud(q)); },
      py::arg("p"), py::arg("q"));

  m.def(
      "solve_imd",
      [](const Array& points, std::vector<double> p, std::vector<double> q,
         std::vector<std::size_t> class_of, std::vector<double> eps) {
        const ImdInstance inst = ImdInstance::from_points(to_tensor(points), std::move(p),
                                                          std::move(q), std::move(class_of),
                                                          std::move(eps));
        return result_to_json(solve_imd(inst));
      },
      py::arg("points"), py::arg("p"), py::arg("q"), py::arg("class_of"), py::arg("epsilons"),
      "Exact discrepancy and bound terms as JSON.");

  m.def(
      "pca",
      [](const Array& z, std::size_t k) {
        const PcaResult r = pca(to_tensor(z), k);
        py::dict out;
        out["mean"] = to_array(r.mean);
        out["projection"] = to_array(r.projection);
        out["eigenvalues"] = r.eigenvalues;
        out["variance_fraction"] = r.variance_fraction;
        out["projected"] = to_array(r.projected);
        return out;
      },
      py::arg("z"), py::arg("k") = 2);

  m.def(
      "gaussian_domains",
      [](const std::string& kv, std::optional<double> alpha, std::uint64_t seed) {
        const DomainPair d = grid_domains(config_from(kv), alpha, seed);
        py::dict out;
        out["source_x"] = to_array(d.training.source_x);
        out["source_y"] = d.training.source_y;
        out["target_x"] = to_array(d.training.target_x);
        out["test_x"] = to_array(d.evaluation.target_x);
        out["test_y"] = d.evaluation.target_y;
        out["target_marginal"] = d.target_marginal;
        return out;
      },
      py::arg("kv") = "", py::arg("alpha") = py::none(), py::arg("seed") = 0);

  m.def("check_suite", [](std::uint64_t seed, std::size_t n) { return gradient_suite(seed, n).to_json(); },
        py::arg("seed") = 0, py::arg("instances") = 20);
  m.def("oracle_suite", [](std::uint64_t seed, std::size_t n) { return oracle_suite(seed, n).to_json(); },
        py::arg("seed") = 0, py::arg("instances") = 100);
}
