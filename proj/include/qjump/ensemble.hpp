#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qjump/unravel.hpp"

namespace qjump {

struct EnsembleConfig {
    long trajectories = 1000;
    std::uint64_t master_seed = 1;
    SamplerMode mode = SamplerMode::spectral_step(1e-3);
    double horizon = 1.0;
    std::vector<double> snapshot_times;
    int workers = 1;
    bool keep_records = false;
    // Average the trajectory states at the snapshot times (dim <= kDenseLimit).
    bool average_states = true;

    void validate() const;
};

/// Terminal counts per detector bin plus the trajectories that never reached one.
struct HitHistogram {
    std::vector<long> counts;
    long survived = 0;
    long total = 0;

    double frequency(std::size_t bin) const;
    double stderr_of(std::size_t bin) const;
    double survived_frequency() const;
};

struct EnsembleSnapshot {
    double time;
    double survival;                 // fraction with no jump yet
    std::vector<double> bin_hits;    // fraction absorbed into each bin by this time
    std::optional<DensityMatrix> average;
};

struct EnsembleResult {
    HitHistogram histogram;
    std::vector<EnsembleSnapshot> snapshots;
    std::vector<double> first_jump_times;  // per trajectory; +inf when it never jumped
    std::vector<TrajectoryRecord> records;  // filled when keep_records
};

/// Thrown when some trajectories failed; carries the indices that completed.
class PartialResultError : public Error {
public:
    PartialResultError(const std::string& what, std::vector<std::size_t> completed)
        : Error(what), completed_(std::move(completed)) {}
    const std::vector<std::size_t>& completed() const noexcept { return completed_; }

private:
    std::vector<std::size_t> completed_;
};

/// Runs cfg.trajectories trajectories, trajectory i on stream
/// RandomStream::derive(master_seed, i). A trajectory ending in a stationary
/// target is binned with the detector projectors `bins`: the bin holding the
/// whole target (weight >= 1 - 1e-9), or, for a target spread over several
/// bins, one bin drawn with probability Tr(Q_b rho) from the trajectory's
/// own stream. Results do not depend on cfg.workers.
EnsembleResult run_ensemble(const LindbladGenerator& gen, const PureState& psi0, const EnsembleConfig& cfg,
                            const std::vector<Projector>& bins);

/// Trace distance between averaged and master snapshots at matching times.
std::vector<std::pair<double, double>> compare_to_master(const std::vector<EnsembleSnapshot>& snapshots,
                                                         const MasterTrajectory& master);

/// sup |F_n(x) - cdf(x)| for ascending samples. With `population` larger than
/// the sample count, the samples are the observed part of a right-censored
/// set of that size (e.g. jump times of trajectories that jumped before the
/// horizon) and F_n is normalized by `population`.
double ks_statistic(const std::vector<double>& sorted_samples, const std::function<double(double)>& cdf,
                    std::size_t population = 0);

/// `pixel_index,pixel_row,count,frequency,stderr` rows plus a `survived` trailer.
void write_histogram_csv(std::ostream& os, const HitHistogram& h, const std::vector<double>& bin_rows);

/// `time,observable,value` rows: survival, hit_<b> and, with averaged states,
/// population_<b> = Tr(Q_b rho_avg).
void write_observables_csv(std::ostream& os, const std::vector<EnsembleSnapshot>& snapshots,
                           const std::vector<Projector>& bins);

}  // namespace qjump
