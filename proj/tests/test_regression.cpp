// Full-size runs of the default 16x8 config, pinned against the first build.
#include <cmath>

#include "qjump/cli.hpp"
#include "support.hpp"

using namespace qjump;

namespace {

RunConfig default_config() {
    return RunConfig::load(std::filesystem::path(QJUMP_SOURCE_DIR) / "configs" / "double_slit_16x8.ini");
}

const double kPinnedPopulations[8] = {
    0.030909495406954986, 0.12015416924562015, 0.056659969104410832, 0.20704622114845861,
    0.2070462211484585,   0.056659969104410818, 0.12015416924562014, 0.030909495406954996,
};

const double kPinnedEscape = 1.6641836621131428e-05;

}  // namespace

TEST_SUITE("regression") {

TEST_CASE("default master fringe profile and the Monte Carlo histogram") {
    const auto cfg = default_config();
    const auto b = build_model(cfg);
    const auto& d = cfg.dynamics;
    const auto tr = integrate_master(b.generator, DensityMatrix::from_pure(b.initial), d.master_dt, d.master_horizon,
                                     step_count(d.master_dt, d.master_horizon));
    const RealVector pops = pixel_populations(*b.double_slit, tr.states.back());
    for (Index s = 0; s < 8; ++s) {
        CHECK(pops(s) == doctest::Approx(kPinnedPopulations[s]).epsilon(1e-8));
        CHECK(std::abs(pops(s) - pops(7 - s)) < 1e-9);
    }
    CHECK(interior_maxima(pops).size() >= 3);
    CHECK(central_visibility(pops) >= 0.5);

    EnsembleConfig ec;
    ec.trajectories = 4000;
    ec.master_seed = cfg.ensemble.seed;
    ec.mode = cfg.sampler_mode();
    ec.horizon = d.master_horizon;
    ec.average_states = false;
    const auto res = run_ensemble(b.generator, b.initial, ec, b.bins);
    const auto& h = res.histogram;
    // multinomial goodness of fit over the pixels plus the undetected class, df 8, p = 0.001
    const double undetected = 1.0 - pops.sum();
    double chi2 = std::pow(static_cast<double>(h.survived) - 4000.0 * undetected, 2) / (4000.0 * undetected);
    RealVector counts(8);
    for (std::size_t s = 0; s < 8; ++s) {
        const double expected = 4000.0 * pops(static_cast<Index>(s));
        chi2 += std::pow(static_cast<double>(h.counts[s]) - expected, 2) / expected;
        counts(static_cast<Index>(s)) = static_cast<double>(h.counts[s]);
    }
    CHECK(chi2 <= 26.12);

    // per-pixel binomial 3 sigma, at ten times the sample size
    ec.trajectories = 40000;
    const auto large = run_ensemble(b.generator, b.initial, ec, b.bins).histogram;
    for (std::size_t s = 0; s < 8; ++s) {
        const double p = pops(static_cast<Index>(s));
        CHECK(std::abs(large.frequency(s) - p) <= 3.0 * std::sqrt(p * (1.0 - p) / 40000.0));
    }
    CHECK(std::abs(large.survived_frequency() - undetected) <= 3.0 * std::sqrt(undetected * (1.0 - undetected) / 40000.0));

    CHECK(interior_maxima(counts).size() >= 3);
    CHECK(central_visibility(counts) >= 0.5);
    // mirror pairs: the count difference has variance ~ c_a + c_b
    for (std::size_t s = 0; s < 4; ++s) {
        const double a = static_cast<double>(h.counts[s]);
        const double c = static_cast<double>(h.counts[7 - s]);
        CHECK(std::abs(a - c) <= 3.0 * std::sqrt(a + c));
    }
}

TEST_CASE("default escape estimate") {
    const auto cfg = default_config();
    const auto b = build_model(cfg);
    const auto& d = cfg.dynamics;
    const auto curve = escape_probability(b.generator, b.initial, d.escape_dt, d.escape_tmax, 1000);
    CHECK(curve.p_esc == doctest::Approx(kPinnedEscape).epsilon(1e-6));
}

}
