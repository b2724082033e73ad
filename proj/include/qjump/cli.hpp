#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qjump/doubleslit.hpp"
#include "qjump/ensemble.hpp"

namespace qjump {

struct ModelSection {
    std::string kind = "double_slit";  // double_slit | two_level
    double alpha = 1.0;
    // double_slit only
    CavityGeometry geometry;
    Index pixels = 8;
    double pixel_range = 0.9;
    double pixel_amplitude = 1.0;
    KernelShape kernel = KernelShape::kExponential;
    std::vector<double> packet_center{2.0, 7.5};
    double packet_width = 1.3;
    std::vector<double> packet_momentum{0.0, 0.0};
};

struct DynamicsSection {
    double master_dt = 0.02;
    double master_horizon = 80.0;
    long master_record_every = 50;
    std::string sampler = "waiting_time";  // waiting_time | spectral_step
    double dt = 0.01;
    double bisection_tol = 1e-9;
    double horizon = 80.0;
    double escape_dt = 0.05;
    double escape_tmax = 8000.0;
    long escape_record_every = 200;
};

struct EnsembleSection {
    long trajectories = 4000;
    std::uint64_t seed = 20240611;
    int workers = 1;
    std::vector<double> snapshot_times{0.5, 1.0, 2.0};
};

struct OutputSection {
    std::string directory = "out";
    bool records = false;
    bool dump_operators = false;
};

/// Sectioned `key = value` configuration ([model], [dynamics], [ensemble],
/// [output]); `#` starts a comment. Lists are comma separated, slits are
/// `lo:hi` row ranges. Unknown sections or keys are rejected.
struct RunConfig {
    ModelSection model;
    DynamicsSection dynamics;
    EnsembleSection ensemble;
    OutputSection output;

    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& path);

    /// Canonical text form; parse(emit()) reproduces the same config.
    std::string emit() const;

    /// Re-validates every module-level invariant; throws ConfigError.
    void validate() const;

    SamplerMode sampler_mode() const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data);

/// Everything a command needs, built from a config.
struct BuiltModel {
    std::optional<DoubleSlitModel> double_slit;
    LindbladGenerator generator;
    PureState initial;
    std::vector<Projector> bins;
    std::vector<double> bin_rows;
};

BuiltModel build_model(const RunConfig& cfg);

/// Commands write their files under `out` and a summary to `log`; they throw
/// on failure (see exit_code_for).
void cmd_master(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_trajectories(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_escape(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
/// Returns false when any check failed.
bool cmd_validate(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

/// 2 for configuration problems, 3 for numerical-invariant failures.
int exit_code_for(const std::exception& e);

/// Full command-line entry point (`qjump <command> [flags]`).
int run_cli(int argc, char** argv);

}  // namespace qjump
