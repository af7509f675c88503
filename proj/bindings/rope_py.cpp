#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "rope/dataset.hpp"
#include "rope/metrics.hpp"
#include "rope/npe.hpp"
#include "rope/rng.hpp"
#include "rope/rope.hpp"
#include "rope/simulators.hpp"
#include "rope/sinkhorn.hpp"

namespace py = pybind11;
using namespace rope;

namespace {

py::array_t<double> to_array(const std::vector<double>& v, std::int64_t rows, std::int64_t cols) {
  py::array_t<double> out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Task parse_task(const std::string& name) { return task_from_name(name); }

}  // namespace

PYBIND11_MODULE(_rope, m) {
  m.doc() = "Robust posterior estimation toolkit (native core)";

  m.def(
      "simulate",
      [](const std::string& task, const std::vector<double>& theta, std::uint64_t seed,
         bool misspecified) {
        const auto obs = rope::simulate(parse_task(task), theta, seed, misspecified);
        return obs.values;
      },
      py::arg("task"), py::arg("theta"), py::arg("seed") = 0, py::arg("misspecified") = false);

  m.def(
      "prior_sample",
      [](const std::string& task, std::uint64_t seed) {
        return prior_sample(parse_task(task), seed).values;
      },
      py::arg("task"), py::arg("seed") = 0);

  m.def(
      "prior_log_density",
      [](const std::string& task, const std::vector<double>& theta) {
        return prior_log_density(parse_task(task), theta);
      },
      py::arg("task"), py::arg("theta"));

  m.def(
      "sinkhorn",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& cost, double gamma,
         double tau, double tol, std::int64_t max_iters) {
        if (cost.ndim() != 2) throw std::invalid_argument("cost must be a 2-d array");
        CostMatrix c;
        c.rows = cost.shape(0);
        c.cols = cost.shape(1);
        c.values.assign(cost.data(), cost.data() + cost.size());
        SinkhornOptions opts;
        opts.tol = tol;
        opts.max_iters = max_iters;
        const Coupling p = sinkhorn_semibalanced(c, gamma, tau, opts);
        py::dict info;
        info["iterations"] = p.iterations;
        info["converged"] = p.converged;
        info["marginal_error"] = p.marginal_error;
        return py::make_tuple(to_array(p.p, p.rows, p.cols), info);
      },
      py::arg("cost"), py::arg("gamma") = 0.5, py::arg("tau") = 1.0, py::arg("tol") = 1e-9,
      py::arg("max_iters") = 10000);

  m.def("rho_from_tau", &rho_from_tau, py::arg("tau"), py::arg("gamma"));

  m.def(
      "generate_dataset",
      [](const std::string& task, std::int64_t n, std::uint64_t seed, bool misspecified) {
        const Dataset ds = generate_dataset(parse_task(task), n, seed, misspecified);
        return py::make_tuple(to_array(ds.theta, ds.n, ds.theta_dim),
                              to_array(ds.obs, ds.n, ds.obs_dim));
      },
      py::arg("task"), py::arg("n"), py::arg("seed") = 0, py::arg("misspecified") = false);

  py::class_<FlowModel, std::shared_ptr<FlowModel>>(m, "FlowModel")
      .def_property_readonly("theta_dim", [](const FlowModel& f) { return f.theta_dim; })
      .def_property_readonly("summary_dim", [](const FlowModel& f) { return f.summary_dim; })
      .def(
          "log_prob",
          [](const FlowModel& f,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& theta,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& summary) {
            const std::int64_t n = theta.ndim() == 2 ? theta.shape(0) : 1;
            std::vector<double> th(theta.data(), theta.data() + theta.size());
            std::vector<double> su(summary.data(), summary.data() + summary.size());
            return flow_log_prob(f, th, su, n);
          },
          py::arg("theta"), py::arg("summary"))
      .def(
          "sample",
          [](const FlowModel& f, const std::vector<double>& summary, std::int64_t n,
             std::uint64_t seed) {
            return to_array(flow_sample(f, summary, n, seed), n, f.theta_dim);
          },
          py::arg("summary"), py::arg("n"), py::arg("seed") = 0)
      .def("summaries",
           [](const FlowModel& f,
              const py::array_t<double, py::array::c_style | py::array::forcecast>& obs) {
             const std::int64_t n = obs.ndim() == 2 ? obs.shape(0) : 1;
             std::vector<double> x(obs.data(), obs.data() + obs.size());
             return to_array(nse_apply_raw(f.nse, x, n), n, f.summary_dim);
           });

  m.def(
      "train_npe",
      [](const std::string& task, std::int64_t max_steps, std::int64_t batch_size, double lr,
         std::int64_t val_interval, std::int64_t val_size, std::uint64_t seed) {
        TrainConfig cfg;
        cfg.max_steps = max_steps;
        cfg.batch_size = batch_size;
        cfg.learning_rate = lr;
        cfg.val_interval = val_interval;
        cfg.val_size = val_size;
        cfg.seed = seed;
        return std::make_shared<FlowModel>(train_npe(parse_task(task), cfg));
      },
      py::arg("task"), py::arg("max_steps") = 3000, py::arg("batch_size") = 100,
      py::arg("lr") = 5e-4, py::arg("val_interval") = 250, py::arg("val_size") = 10000,
      py::arg("seed") = 0);

  m.def("save_checkpoint",
        [](const std::shared_ptr<FlowModel>& f, const std::string& path) { save_checkpoint(*f, path); });
  m.def("load_checkpoint",
        [](const std::string& path) { return std::make_shared<FlowModel>(load_checkpoint(path)); });

  m.def(
      "objective_value",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& p,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& cost, double gamma,
         double rho) {
        CostMatrix c;
        c.rows = cost.shape(0);
        c.cols = cost.shape(1);
        c.values.assign(cost.data(), cost.data() + cost.size());
        std::vector<double> pv(p.data(), p.data() + p.size());
        return objective_value(pv, c, gamma, rho);
      },
      py::arg("coupling"), py::arg("cost"), py::arg("gamma"), py::arg("rho"));

  m.def(
      "run_rope_pendulum_demo",
      [](std::int64_t n_test, std::int64_t n_calibration, std::int64_t train_steps, double gamma,
         double tau, std::uint64_t seed) {
        TrainConfig tc;
        tc.max_steps = train_steps;
        tc.val_size = 1000;
        tc.val_interval = std::max<std::int64_t>(50, train_steps / 10);
        tc.seed = seed;
        auto model = std::make_shared<FlowModel>(train_npe(Task::pendulum, tc));
        const Dataset pool =
            generate_dataset(Task::pendulum, n_calibration + n_test, mix_seed(seed, 1), true);
        const auto splits = make_splits(pool, n_calibration, n_test, mix_seed(seed, 2));
        RopeConfig rc;
        rc.gamma = gamma;
        rc.tau = tau;
        rc.finetune.steps = 200;
        const auto result =
            run_rope(model, splits.calibration, splits.calibration_val, splits.test, seed, rc);
        const auto lpp = compute_lpp(*result.posterior, splits.test);
        PriorPosterior prior(Task::pendulum, splits.test.n);
        const auto prior_lpp = compute_lpp(prior, splits.test);
        py::dict out;
        out["lpp"] = lpp.mean;
        out["prior_lpp"] = prior_lpp.mean;
        out["coupling_converged"] = result.coupling.converged;
        return out;
      },
      py::arg("n_test") = 64, py::arg("n_calibration") = 20, py::arg("train_steps") = 200,
      py::arg("gamma") = 0.5, py::arg("tau") = 1.0, py::arg("seed") = 0);
}
