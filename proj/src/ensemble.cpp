#include "qjump/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>

namespace qjump {

void EnsembleConfig::validate() const {
    if (trajectories < 1) {
        throw ConfigError("ensemble needs at least one trajectory");
    }
    if (workers < 1) {
        throw ConfigError("worker count must be >= 1");
    }
    if (!(horizon >= 0.0) || !std::isfinite(horizon)) {
        throw ConfigError("horizon must be finite and >= 0");
    }
    for (std::size_t k = 0; k < snapshot_times.size(); ++k) {
        const double t = snapshot_times[k];
        if (!(t >= 0.0) || t > horizon * (1.0 + 1e-12)) {
            throw ConfigError(fmt::format("snapshot time {} outside [0, {}]", t, horizon));
        }
        if (k > 0 && !(t > snapshot_times[k - 1])) {
            throw ConfigError("snapshot times must be strictly increasing");
        }
    }
}

double HitHistogram::frequency(std::size_t bin) const {
    return total > 0 ? static_cast<double>(counts.at(bin)) / static_cast<double>(total) : 0.0;
}

double HitHistogram::stderr_of(std::size_t bin) const {
    const double f = frequency(bin);
    return total > 0 ? std::sqrt(f * (1.0 - f) / static_cast<double>(total)) : 0.0;
}

double HitHistogram::survived_frequency() const {
    return total > 0 ? static_cast<double>(survived) / static_cast<double>(total) : 0.0;
}

namespace {

struct Outcome {
    bool done = false;
    int bin = -1;
    double hit_time = std::numeric_limits<double>::infinity();
    double first_jump = std::numeric_limits<double>::infinity();
    std::vector<StateSnapshot> snapshots;
    std::optional<TrajectoryRecord> record;
};

int classify(const Projector& target, const std::vector<Projector>& bins, RandomStream& rng) {
    std::vector<double> w(bins.size());
    for (std::size_t b = 0; b < bins.size(); ++b) {
        w[b] = (bins[b].basis().adjoint() * target.basis()).squaredNorm() / static_cast<double>(target.rank());
        if (w[b] >= 1.0 - 1e-9) {
            return static_cast<int>(b);
        }
    }
    double total = 0.0;
    for (double x : w) {
        total += x;
    }
    if (total < 1.0 - 1e-6) {
        throw NumericalError(fmt::format("jump target lies outside the detector bins (weight {:.9f})", total));
    }
    // a target spread over several bins is read out once, with the Born weights
    const double v = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t b = 0; b < w.size(); ++b) {
        acc += w[b];
        if (v < acc) {
            return static_cast<int>(b);
        }
    }
    return static_cast<int>(w.size()) - 1;
}

}  // namespace

EnsembleResult run_ensemble(const LindbladGenerator& gen, const PureState& psi0, const EnsembleConfig& cfg,
                            const std::vector<Projector>& bins) {
    cfg.validate();
    require_same_dim(gen.dim(), psi0.dim(), "run_ensemble");
    for (const auto& b : bins) {
        require_same_dim(gen.dim(), b.dim(), "run_ensemble bins");
    }
    const auto m = static_cast<std::size_t>(cfg.trajectories);
    const bool averaging = cfg.average_states && gen.dim() <= kDenseLimit && !cfg.snapshot_times.empty();

    std::vector<RandomStream> streams;
    streams.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        streams.push_back(RandomStream::derive(cfg.master_seed, i));
    }
    std::vector<Outcome> outcomes(m);

    auto on_done = [&](std::size_t i, TrajectoryRecord&& rec) {
        Outcome& o = outcomes[i];
        if (!rec.events.empty()) {
            o.first_jump = rec.events.front().time;
        }
        if (rec.terminal == TerminalKind::kJumpedTo) {
            o.bin = classify(rec.events.back().target, bins, streams[i]);
            o.hit_time = rec.end_time;
            rec.detector_bin = o.bin;
        }
        if (averaging) {
            o.snapshots = rec.snapshots;
        }
        if (cfg.keep_records) {
            o.record = std::move(rec);
        }
        o.done = true;
    };

    const auto workers = static_cast<std::size_t>(std::min<long>(cfg.workers, cfg.trajectories));
    std::vector<std::string> failures;
    std::mutex failure_mutex;
    auto run_chunk = [&](std::size_t w) {
        const std::size_t lo = m * w / workers;
        const std::size_t hi = m * (w + 1) / workers;
        try {
            run_trajectory_batch(gen, psi0, cfg.mode, cfg.horizon,
                                 std::span<RandomStream>(streams.data() + lo, hi - lo), cfg.snapshot_times,
                                 [&](std::size_t j, TrajectoryRecord&& rec) { on_done(lo + j, std::move(rec)); });
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            failures.push_back(fmt::format("trajectories [{}, {}): {}", lo, hi, e.what()));
        }
    };
    if (workers == 1) {
        run_chunk(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(run_chunk, w);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    if (!failures.empty()) {
        std::sort(failures.begin(), failures.end());
        std::vector<std::size_t> completed;
        for (std::size_t i = 0; i < m; ++i) {
            if (outcomes[i].done) {
                completed.push_back(i);
            }
        }
        std::string what = "ensemble incomplete:";
        for (const auto& f : failures) {
            what += " " + f + ";";
        }
        throw PartialResultError(what, std::move(completed));
    }

    // aggregation strictly in trajectory index order
    EnsembleResult out;
    out.histogram.counts.assign(bins.size(), 0);
    out.histogram.total = static_cast<long>(m);
    out.first_jump_times.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const Outcome& o = outcomes[i];
        if (o.bin >= 0) {
            ++out.histogram.counts[static_cast<std::size_t>(o.bin)];
        } else {
            ++out.histogram.survived;
        }
        out.first_jump_times.push_back(o.first_jump);
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t k = 0; k < cfg.snapshot_times.size(); ++k) {
        const double t = cfg.snapshot_times[k];
        EnsembleSnapshot snap{t, 0.0, std::vector<double>(bins.size(), 0.0), std::nullopt};
        long alive = 0;
        for (std::size_t i = 0; i < m; ++i) {
            const Outcome& o = outcomes[i];
            if (o.first_jump > t) {
                ++alive;
            }
            if (o.bin >= 0 && o.hit_time <= t) {
                snap.bin_hits[static_cast<std::size_t>(o.bin)] += 1.0;
            }
        }
        snap.survival = static_cast<double>(alive) * inv_m;
        for (double& h : snap.bin_hits) {
            h *= inv_m;
        }
        if (averaging) {
            Index cols = 0;
            for (const auto& o : outcomes) {
                cols += o.snapshots.at(k).state.rank();
            }
            Matrix stacked(gen.dim(), cols);
            Index c = 0;
            for (const auto& o : outcomes) {
                const Projector& p = o.snapshots[k].state;
                stacked.middleCols(c, p.rank()) = p.basis() / std::sqrt(static_cast<double>(p.rank()));
                c += p.rank();
            }
            Matrix avg = inv_m * (stacked * stacked.adjoint());
            snap.average.emplace(0.5 * (avg + avg.adjoint()), StateTolerances{1e-9, 1e-9, 1e-12});
        }
        out.snapshots.push_back(std::move(snap));
    }
    if (cfg.keep_records) {
        out.records.reserve(m);
        for (auto& o : outcomes) {
            out.records.push_back(std::move(*o.record));
        }
    }
    return out;
}

std::vector<std::pair<double, double>> compare_to_master(const std::vector<EnsembleSnapshot>& snapshots,
                                                         const MasterTrajectory& master) {
    std::vector<std::pair<double, double>> out;
    for (const auto& s : snapshots) {
        if (!s.average) {
            throw StructuralError(fmt::format("snapshot at t={} carries no averaged state", s.time));
        }
        const double tol = 1e-9 * std::max(1.0, std::abs(s.time));
        const auto it = std::find_if(master.times.begin(), master.times.end(),
                                     [&](double t) { return std::abs(t - s.time) <= tol; });
        if (it == master.times.end()) {
            throw StructuralError(fmt::format("master trajectory has no snapshot at t={}", s.time));
        }
        const auto& rho = master.states[static_cast<std::size_t>(it - master.times.begin())];
        require_same_dim(rho.dim(), s.average->dim(), "compare_to_master");
        out.emplace_back(s.time, trace_distance(s.average->matrix(), rho.matrix()));
    }
    return out;
}

double ks_statistic(const std::vector<double>& sorted_samples, const std::function<double(double)>& cdf,
                    std::size_t population) {
    if (sorted_samples.empty()) {
        throw StructuralError("KS statistic of an empty sample");
    }
    if (!std::is_sorted(sorted_samples.begin(), sorted_samples.end())) {
        throw StructuralError("KS samples must be sorted ascending");
    }
    if (population != 0 && population < sorted_samples.size()) {
        throw StructuralError("KS population smaller than the sample");
    }
    const double n = static_cast<double>(population == 0 ? sorted_samples.size() : population);
    double d = 0.0;
    for (std::size_t i = 0; i < sorted_samples.size(); ++i) {
        const double f = cdf(sorted_samples[i]);
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    return d;
}

void write_histogram_csv(std::ostream& os, const HitHistogram& h, const std::vector<double>& bin_rows) {
    if (bin_rows.size() != h.counts.size()) {
        throw DimensionError("one row coordinate per bin is required");
    }
    os << "pixel_index,pixel_row,count,frequency,stderr\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
        os << fmt::format("{},{:.17g},{},{:.17g},{:.17g}\n", b, bin_rows[b], h.counts[b], h.frequency(b),
                          h.stderr_of(b));
    }
    const double f = h.survived_frequency();
    const double se = h.total > 0 ? std::sqrt(f * (1.0 - f) / static_cast<double>(h.total)) : 0.0;
    os << fmt::format("survived,,{},{:.17g},{:.17g}\n", h.survived, f, se);
}

void write_observables_csv(std::ostream& os, const std::vector<EnsembleSnapshot>& snapshots,
                           const std::vector<Projector>& bins) {
    os << "time,observable,value\n";
    for (const auto& s : snapshots) {
        os << fmt::format("{:.17g},survival,{:.17g}\n", s.time, s.survival);
        for (std::size_t b = 0; b < s.bin_hits.size(); ++b) {
            os << fmt::format("{:.17g},hit_{},{:.17g}\n", s.time, b, s.bin_hits[b]);
        }
        if (s.average) {
            for (std::size_t b = 0; b < bins.size(); ++b) {
                os << fmt::format("{:.17g},population_{},{:.17g}\n", s.time, b,
                                  bins[b].expectation_in(s.average->matrix()));
            }
        }
    }
}

}  // namespace qjump
