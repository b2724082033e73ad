#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qjump/cli.hpp"

namespace py = pybind11;
using namespace qjump;

namespace {

std::vector<SparseMatrix> to_sparse(const std::vector<Matrix>& ops) {
    std::vector<SparseMatrix> out;
    for (const auto& t : ops) {
        out.emplace_back(t.sparseView());
    }
    return out;
}

SamplerMode make_mode(const std::string& sampler, double dt, double bisection_tol) {
    if (sampler == "waiting_time") {
        return SamplerMode::waiting_time(dt, bisection_tol);
    }
    if (sampler == "spectral_step") {
        return SamplerMode::spectral_step(dt);
    }
    throw ConfigError("sampler must be waiting_time or spectral_step");
}

py::dict master_dict(const MasterTrajectory& tr) {
    std::vector<Matrix> states;
    for (const auto& s : tr.states) {
        states.push_back(s.matrix());
    }
    py::dict d;
    d["times"] = tr.times;
    d["states"] = states;
    d["max_trace_drift"] = tr.max_trace_drift;
    d["min_eigenvalue"] = tr.min_eigenvalue;
    return d;
}

py::dict ensemble_dict(const EnsembleResult& r) {
    py::list snaps;
    for (const auto& s : r.snapshots) {
        py::dict d;
        d["time"] = s.time;
        d["survival"] = s.survival;
        d["bin_hits"] = s.bin_hits;
        if (s.average) {
            d["average"] = s.average->matrix();
        } else {
            d["average"] = py::none();
        }
        snaps.append(d);
    }
    py::dict d;
    d["counts"] = r.histogram.counts;
    d["survived"] = r.histogram.survived;
    d["total"] = r.histogram.total;
    d["first_jump_times"] = r.first_jump_times;
    d["snapshots"] = snaps;
    return d;
}

}  // namespace

PYBIND11_MODULE(_qjump, m) {
    m.doc() = "Quantum-jump unraveling of Lindblad dynamics";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<StructuralError>(m, "StructuralError", base.ptr());
    py::register_exception<ModeUnsupportedError>(m, "ModeUnsupportedError", base.ptr());
    auto numerical = py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
    py::register_exception<IntegrationError>(m, "IntegrationError", numerical.ptr());
    py::register_exception<StepSizeError>(m, "StepSizeError", numerical.ptr());

    py::class_<LindbladGenerator>(m, "Generator")
        .def(py::init([](const Matrix& h, double alpha, const std::vector<Matrix>& jumps) {
                 return LindbladGenerator(HermitianOperator::from_dense(h), alpha, to_sparse(jumps));
             }),
             py::arg("hamiltonian"), py::arg("alpha"), py::arg("jump_ops"))
        .def_property_readonly("dim", &LindbladGenerator::dim)
        .def_property_readonly("alpha", &LindbladGenerator::alpha)
        .def("apply", &LindbladGenerator::apply, py::arg("x"), "L[X] for a dense X.");

    m.def(
        "two_level",
        [](double alpha) {
            SparseMatrix t(2, 2);
            t.insert(1, 0) = Complex(1.0, 0.0);
            return LindbladGenerator(HermitianOperator::from_dense(Matrix::Zero(2, 2)), alpha, {t});
        },
        py::arg("alpha") = 1.0, "Amplitude damping: H = 0, T = |1><0|.");

    py::class_<RunConfig>(m, "Config")
        .def_static("parse", &RunConfig::parse, py::arg("text"))
        .def_static("load", &RunConfig::load, py::arg("path"))
        .def("emit", &RunConfig::emit)
        .def("validate", &RunConfig::validate)
        .def_property(
            "trajectories", [](const RunConfig& c) { return c.ensemble.trajectories; },
            [](RunConfig& c, long v) { c.ensemble.trajectories = v; })
        .def_property(
            "seed", [](const RunConfig& c) { return c.ensemble.seed; },
            [](RunConfig& c, std::uint64_t v) { c.ensemble.seed = v; })
        .def_property(
            "alpha", [](const RunConfig& c) { return c.model.alpha; }, [](RunConfig& c, double v) { c.model.alpha = v; })
        .def_property_readonly("kind", [](const RunConfig& c) { return c.model.kind; });

    py::class_<BuiltModel>(m, "Model")
        .def(py::init([](const RunConfig& c) { return build_model(c); }), py::arg("config"))
        .def_property_readonly("generator", [](const BuiltModel& b) { return b.generator; })
        .def_property_readonly("initial", [](const BuiltModel& b) { return Vector(b.initial.amplitudes()); })
        .def_property_readonly("bin_rows", [](const BuiltModel& b) { return b.bin_rows; })
        .def_property_readonly("bins", [](const BuiltModel& b) { return b.bins.size(); })
        .def(
            "pixel_populations",
            [](const BuiltModel& b, const Matrix& rho) {
                if (!b.double_slit) {
                    throw ConfigError("pixel populations need a double_slit model");
                }
                return RealVector(pixel_populations(*b.double_slit, DensityMatrix(rho)));
            },
            py::arg("rho"))
        .def(
            "run_ensemble",
            [](const BuiltModel& b, long trajectories, std::uint64_t seed, const std::string& sampler, double dt,
               double horizon, std::vector<double> snapshot_times, int workers, bool average_states) {
                EnsembleConfig cfg;
                cfg.trajectories = trajectories;
                cfg.master_seed = seed;
                cfg.mode = make_mode(sampler, dt, 1e-10);
                cfg.horizon = horizon;
                cfg.snapshot_times = std::move(snapshot_times);
                cfg.workers = workers;
                cfg.average_states = average_states;
                EnsembleResult r;
                {
                    py::gil_scoped_release release;
                    r = run_ensemble(b.generator, b.initial, cfg, b.bins);
                }
                return ensemble_dict(r);
            },
            py::arg("trajectories"), py::arg("seed"), py::arg("sampler") = "waiting_time", py::arg("dt") = 0.01,
            py::arg("horizon") = 1.0, py::arg("snapshot_times") = std::vector<double>{}, py::arg("workers") = 1,
            py::arg("average_states") = true);

    m.def(
        "integrate_master",
        [](const LindbladGenerator& gen, const Matrix& rho0, double dt, double t_end, long every) {
            const DensityMatrix rho(rho0);
            MasterTrajectory tr;
            {
                py::gil_scoped_release release;
                tr = integrate_master(gen, rho, dt, t_end, every);
            }
            return master_dict(tr);
        },
        py::arg("generator"), py::arg("rho0"), py::arg("dt"), py::arg("t_end"), py::arg("snapshot_every") = 1);

    m.def(
        "escape_probability",
        [](const LindbladGenerator& gen, const Vector& psi0, double dt, double t_max, long every) {
            const PureState psi = PureState::normalized(psi0);
            EscapeCurve c;
            {
                py::gil_scoped_release release;
                c = escape_probability(gen, psi, dt, t_max, every);
            }
            return py::make_tuple(c.times, c.p);
        },
        py::arg("generator"), py::arg("psi0"), py::arg("dt"), py::arg("t_max"), py::arg("record_every") = 1);

    m.def(
        "jump_spectrum",
        [](const LindbladGenerator& gen, const Vector& psi) {
            std::vector<std::pair<double, Matrix>> out;
            for (const auto& c : jump_spectrum(gen, Projector::from_vector(psi / psi.norm()))) {
                out.emplace_back(c.rate, c.target.dense());
            }
            return out;
        },
        py::arg("generator"), py::arg("psi"), "(rate, target projector) per jump channel.");

    m.def(
        "dissipation_rate",
        [](const LindbladGenerator& gen, const Vector& psi) {
            return dissipation_rate(gen, Projector::from_vector(psi / psi.norm()));
        },
        py::arg("generator"), py::arg("psi"));

    m.def(
        "ks_statistic",
        [](std::vector<double> samples, const std::function<double(double)>& cdf, std::size_t population) {
            return ks_statistic(samples, cdf, population);
        },
        py::arg("sorted_samples"), py::arg("cdf"), py::arg("population") = 0);

    m.def("trace_distance", &trace_distance, py::arg("a"), py::arg("b"));
    m.def("fnv1a", [](const std::string& s) { return fnv1a(s); }, py::arg("data"));

    m.def(
        "run_cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "qjump");
            std::vector<char*> argv;
            for (auto& a : args) {
                argv.push_back(a.data());
            }
            py::gil_scoped_release release;
            return run_cli(static_cast<int>(argv.size()), argv.data());
        },
        py::arg("args"), "Runs the command-line tool in process; returns its exit code.");
}
