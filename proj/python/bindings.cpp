#include "intrafair/blackbox.hpp"
#include "intrafair/data.hpp"
#include "intrafair/error.hpp"
#include "intrafair/harness.hpp"
#include "intrafair/json_io.hpp"
#include "intrafair/metrics.hpp"
#include "intrafair/nn.hpp"
#include "intrafair/postproc.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace intrafair;

namespace {

ObjectiveSpec spec_of(const std::string& bias, double epsilon) { return {parse_bias_kind(bias), epsilon}; }

py::dict threshold_dict(const ThresholdChoice& c) {
    py::dict d;
    d["threshold"] = c.threshold;
    d["objective"] = c.objective;
    d["bias"] = c.bias_value;
    d["performance"] = c.performance;
    return d;
}

py::dict minimize_dict(const MinimizeResult& r) {
    std::vector<std::vector<double>> points;
    std::vector<double> values;
    for (const auto& o : r.history) {
        points.push_back(o.point);
        values.push_back(o.value);
    }
    py::dict d;
    d["best_point"] = r.best_point;
    d["best_value"] = r.best_value;
    d["best_index"] = r.best_index;
    d["points"] = points;
    d["values"] = values;
    return d;
}

py::array_t<int> as_array(const BinaryVector& v) {
    return py::array_t<int>(static_cast<py::ssize_t>(v.size()), v.data());
}

Objective wrap(py::function f) {
    return [f](std::span<const double> x) {
        py::gil_scoped_acquire gil;
        return f(std::vector<double>(x.begin(), x.end())).cast<double>();
    };
}

PostprocRule fit_rule(const std::string& method, const std::vector<double>& scores, const BinaryVector& labels,
                      const BinaryVector& groups, Seed seed, const std::string& bias, double epsilon) {
    switch (parse_postproc_kind(method)) {
        case PostprocKind::reject_option: return fit_reject_option(scores, labels, groups, spec_of(bias, epsilon));
        case PostprocKind::eq_odds: return fit_eq_odds(scores, labels, groups, seed);
        case PostprocKind::calibrated_eq_odds: return fit_calibrated_eq_odds(scores, labels, groups, seed);
    }
    throw ValidationError("unknown post-processing method " + method);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core of intrafair.";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
    py::register_exception<UndefinedRateError>(m, "UndefinedRateError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<LoadError>(m, "LoadError", base.ptr());

    m.def("bias", [](const std::string& kind, const BinaryVector& labels, const BinaryVector& preds,
                     const BinaryVector& groups) { return bias(parse_bias_kind(kind), labels, preds, groups); },
          py::arg("kind"), py::arg("labels"), py::arg("predictions"), py::arg("groups"));
    m.def("balanced_accuracy",
          [](const BinaryVector& labels, const BinaryVector& preds) { return balanced_accuracy(labels, preds); },
          py::arg("labels"), py::arg("predictions"));
    m.def("objective_value",
          [](double bias_value, double performance, double epsilon) {
              return objective_value(spec_of("spd", epsilon), bias_value, performance);
          },
          py::arg("bias_value"), py::arg("performance"), py::arg("epsilon"));
    m.def("select_threshold",
          [](const BinaryVector& labels, const std::vector<double>& scores, const BinaryVector& groups,
             const std::string& bias, double epsilon) {
              return threshold_dict(
                  select_threshold(spec_of(bias, epsilon), labels, std::span<const double>(scores), groups));
          },
          py::arg("labels"), py::arg("scores"), py::arg("groups"), py::arg("bias") = "spd", py::arg("epsilon") = 0.05);
    m.def("evaluate_scores",
          [](const BinaryVector& labels, const std::vector<double>& scores, const BinaryVector& groups,
             double threshold, const std::string& bias, double epsilon) {
              return to_json(evaluate_scores(spec_of(bias, epsilon), labels, scores, groups, threshold)).dump();
          },
          py::arg("labels"), py::arg("scores"), py::arg("groups"), py::arg("threshold") = 0.5,
          py::arg("bias") = "spd", py::arg("epsilon") = 0.05);

    m.def("generate_synthetic",
          [](std::size_t n, std::size_t d, double target_spd, double group0_fraction, double label_noise,
             double signal, double group_shift, Seed seed) {
              const auto ds = generate_synthetic({n, d, target_spd, group0_fraction, label_noise, signal,
                                                  group_shift, seed});
              return py::make_tuple(ds.features, as_array(ds.labels), as_array(ds.groups));
          },
          py::arg("n") = 20000, py::arg("d") = 8, py::arg("target_spd") = 0.3, py::arg("group0_fraction") = 0.7,
          py::arg("label_noise") = 0.05, py::arg("signal") = 0.4, py::arg("group_shift") = 0.5, py::arg("seed") = 0);

    py::class_<Network>(m, "Network")
        .def(py::init<std::size_t, const std::vector<std::size_t>&, double, Seed>(), py::arg("input_dim"),
             py::arg("hidden"), py::arg("dropout") = 0.0, py::arg("seed") = 0)
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def_static("from_json", &checkpoint_from_string, py::arg("text"))
        .def("save", [](const Network& net, const std::filesystem::path& p) { save_checkpoint(net, p); },
             py::arg("path"))
        .def("to_json", &checkpoint_to_string)
        .def("predict", [](const Network& net, const Matrix& x) { return forward(net, x); }, py::arg("features"))
        .def_property_readonly("input_dim", &Network::input_dim)
        .def_property_readonly("num_layers", &Network::num_layers)
        .def_property_readonly("hidden", &Network::hidden_sizes)
        .def_property_readonly("num_parameters", [](const Network& net) { return net.parameters().size(); })
        .def("__eq__", [](const Network& a, const Network& b) { return a == b; });

    m.def("default_config", [] { return config_to_json(ExperimentConfig{}); });
    m.def("normalize_config", [](const std::string& text) { return config_to_json(config_from_json(text)); },
          py::arg("config"));
    m.def("baseline",
          [](const std::string& config, Seed seed) {
              const auto cfg = config_from_json(config);
              py::gil_scoped_release release;
              return baseline_network(cfg, prepare_data(cfg), seed);
          },
          py::arg("config"), py::arg("seed") = 0);
    m.def("run_method",
          [](const std::string& config, const std::string& method, Seed seed) {
              const auto cfg = config_from_json(config);
              py::gil_scoped_release release;
              const auto data = prepare_data(cfg);
              const auto net = baseline_network(cfg, data, seed);
              return to_json(run_method(parse_method_kind(method), net, data.splits, cfg, seed)).dump();
          },
          py::arg("config"), py::arg("method"), py::arg("seed") = 0);
    m.def("run_sweep",
          [](const std::string& config) {
              const auto cfg = config_from_json(config);
              py::gil_scoped_release release;
              const auto r = run_sweep(cfg);
              Json out{{"trials", Json::array()}, {"aggregate", Json::array()}};
              for (const auto& t : r.trials) out["trials"].push_back(to_json(t));
              for (const auto& row : r.aggregate) out["aggregate"].push_back(to_json(row));
              return out.dump();
          },
          py::arg("config"));
    m.def("variance_study",
          [](const std::string& config, std::size_t networks) {
              const auto cfg = config_from_json(config);
              py::gil_scoped_release release;
              return to_json(variance_study(cfg, networks)).dump();
          },
          py::arg("config"), py::arg("networks") = 10);
    m.def("sensitivity_study",
          [](const std::string& config, std::size_t networks, std::size_t deltas, double delta_std, double ridge,
             double holdout_fraction) {
              const auto cfg = config_from_json(config);
              SensitivityConfig s;
              s.networks = networks;
              s.deltas = deltas;
              s.delta_std = delta_std;
              s.ridge = ridge;
              s.holdout_fraction = holdout_fraction;
              py::gil_scoped_release release;
              return to_json(sensitivity_study(cfg, s)).dump();
          },
          py::arg("config"), py::arg("networks") = 10, py::arg("deltas") = 1000, py::arg("delta_std") = 0.1,
          py::arg("ridge") = 1e-6, py::arg("holdout_fraction") = 0.2);

    m.def("fit_postproc", [](const std::string& method, const std::vector<double>& scores, const BinaryVector& labels,
                             const BinaryVector& groups, Seed seed, const std::string& bias,
                             double epsilon) { return rule_to_string(fit_rule(method, scores, labels, groups, seed, bias, epsilon)); },
          py::arg("method"), py::arg("scores"), py::arg("labels"), py::arg("groups"), py::arg("seed") = 0,
          py::arg("bias") = "spd", py::arg("epsilon") = 0.05);
    m.def("apply_postproc",
          [](const std::string& rule, const std::vector<double>& scores, const BinaryVector& groups,
             std::optional<Seed> seed) {
              const auto r = rule_from_string(rule);
              return seed ? apply(r, scores, groups, *seed) : apply(r, scores, groups);
          },
          py::arg("rule"), py::arg("scores"), py::arg("groups"), py::arg("seed") = py::none());

    m.def("minimize",
          [](py::function f, std::vector<double> lower, std::vector<double> upper, std::size_t budget, Seed seed,
             std::size_t n_init) {
              MinimizeConfig cfg;
              cfg.budget = budget;
              cfg.n_init = n_init;
              cfg.seed = seed;
              return minimize_dict(minimize(wrap(std::move(f)), SearchSpace::box(std::move(lower), std::move(upper)), cfg));
          },
          py::arg("f"), py::arg("lower"), py::arg("upper"), py::arg("budget") = 50, py::arg("seed") = 0,
          py::arg("n_init") = 0);
    m.def("random_search",
          [](py::function f, std::vector<double> lower, std::vector<double> upper, std::size_t budget, Seed seed) {
              return minimize_dict(
                  random_search(wrap(std::move(f)), SearchSpace::box(std::move(lower), std::move(upper)), budget, seed));
          },
          py::arg("f"), py::arg("lower"), py::arg("upper"), py::arg("budget") = 50, py::arg("seed") = 0);
}
