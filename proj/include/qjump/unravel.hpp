#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qjump/lindblad.hpp"
#include "qjump/rng.hpp"

namespace qjump {

/// How individual trajectories are sampled.
///  - spectral step: decompose rho + L[rho] dt every `dt` and pick a branch
///    with frequency p * rank (state selection).
///  - waiting time: integrate the unnormalized no-jump evolution with RK4
///    steps of `dt` until its norm^2 falls to a uniform draw, then pick the
///    jump target from the jump spectrum.
struct SamplerMode {
    enum class Kind { kSpectralStep, kWaitingTime };

    Kind kind = Kind::kSpectralStep;
    double dt = 1e-3;
    double bisection_tol = 1e-9;

    static SamplerMode spectral_step(double dt);
    static SamplerMode waiting_time(double ode_dt, double bisection_tol);

    const char* name() const;
};

struct JumpEvent {
    double time;
    int branch_index;  // >= 1; 0 is the no-jump branch
    Projector target;
    double weight;     // probability of the sampled branch, in (0, 1]
};

enum class TerminalKind { kJumpedTo, kSurvivedToHorizon };

struct StateSnapshot {
    double time;
    Projector state;
};

struct TrajectoryRecord {
    std::uint64_t seed = 0;
    SamplerMode mode;
    double horizon = 0.0;
    std::vector<JumpEvent> events;
    std::vector<StateSnapshot> snapshots;
    TerminalKind terminal = TerminalKind::kSurvivedToHorizon;
    double end_time = 0.0;
    // When the trajectory ended in a stationary jump target, that target's
    // index among the caller's detector bins is filled in by the ensemble.
    int detector_bin = -1;
};

using TargetLabeler = std::function<std::string(const Projector&)>;

/// "e<k>" for a basis vector, "rank<r>" otherwise.
std::string default_target_label(const Projector& p);

/// Header line `# seed=..,mode=..,dt=..,horizon=..`, one
/// `time,branchIndex,weight,targetLabel` line per event, then a
/// `# terminal=..` line. Doubles use 17 significant digits.
std::string serialize(const TrajectoryRecord& rec, const TargetLabeler& label = default_target_label);

// ---------------------------------------------------------------------------
// Spectral-step pieces

/// rho + L[rho] dt for the individual state rho = P / rank(P), validated as
/// a density matrix with positivity allowance 10 dt^2 ||L[rho]||^2.
DensityMatrix one_step_ensemble(const LindbladGenerator& gen, const Projector& p, double dt);

/// The same operator as a low-rank factorization (never forms d x d).
FactoredHermitian one_step_factored(const LindbladGenerator& gen, const Projector& p, double dt);

/// Spectral decomposition of the one-step state via the factored route.
SpectralDecomposition one_step_decompose(const LindbladGenerator& gen, const Projector& p, double dt);

struct BranchChoice {
    int branch_index;   // 0 = no jump (continuity branch)
    Projector state;    // range of the chosen branch; the state is state / rank
    double probability; // p * rank
};

/// Index into decomp.branches of the branch maximizing Tr(Pi^delta * ref).
std::size_t continuity_branch(const SpectralDecomposition& decomp, const Projector& ref);

/// Inverse-CDF pick with a single uniform u in (0, 1).
BranchChoice select_branch(const SpectralDecomposition& decomp, const Projector& continuity_ref, double u);
BranchChoice select_branch(const SpectralDecomposition& decomp, const Projector& continuity_ref,
                           RandomStream& rng);

// ---------------------------------------------------------------------------
// No-jump evolution

struct NoJumpPath {
    std::vector<double> times;
    std::vector<Projector> states;
    double max_correction = 0.0;  // largest idempotency residual removed by re-projection
    long corrections = 0;
};

/// RK4 of dPi/dt = Pi^perp L[Pi] Pi + Pi L[Pi] Pi^perp for rank-1 Pi, carried
/// on a state vector psi with psi' = Pi^perp L[Pi] psi (same projector flow).
NoJumpPath no_jump_evolve(const LindbladGenerator& gen, const Projector& p0, double dt, double t_end);

/// Reference route: RK4 directly on the dense d x d projector ODE.
NoJumpPath no_jump_evolve_matrix(const LindbladGenerator& gen, const Projector& p0, double dt,
                                 double t_end);

/// exp(integral of Tr(Pi L[Pi])) by the trapezoidal rule along the path.
double no_jump_survival(const LindbladGenerator& gen, const NoJumpPath& path);

struct JumpChannel {
    double rate;
    Projector target;
};

/// Nonzero spectrum of Pi^perp L[Pi] Pi^perp = alpha sum_s Pi^perp T_s Pi T_s^* Pi^perp.
/// Channels whose images are mutually orthogonal stay separate even at equal
/// rates; inside a group of overlapping images, eigenvalues equal within the
/// degeneracy tolerance form one eigenprojector whose rate is their sum.
/// Rates sorted descending.
std::vector<JumpChannel> jump_spectrum(const LindbladGenerator& gen, const Projector& p);

/// RK4 step of psi' = -i K psi (unnormalized no-jump evolution).
Vector effective_rk4_step(const LindbladGenerator& gen, const Vector& psi, double h);

/// L[P] = 0 within tol: every T_s annihilates range(P) and H leaves it invariant.
bool is_stationary(const LindbladGenerator& gen, const Projector& p, double tol = 1e-12);

/// Throws ModeUnsupportedError unless ||Pi^perp (sum_s T_s Pi T_s^*) Pi|| <= 1e-12.
void check_waiting_premise(const LindbladGenerator& gen, const Vector& unit_psi);

// ---------------------------------------------------------------------------
// Trajectories

TrajectoryRecord run_trajectory_spectral(const LindbladGenerator& gen, const PureState& psi0, double dt,
                                         double horizon, RandomStream& rng,
                                         std::span<const double> snapshot_times = {});

TrajectoryRecord run_trajectory_waiting(const LindbladGenerator& gen, const PureState& psi0,
                                        const SamplerMode& mode, double horizon, RandomStream& rng,
                                        std::span<const double> snapshot_times = {});

/// Runs one trajectory per stream, all starting from psi0 at t = 0. While no
/// trajectory has jumped they share one no-jump state, which is evolved once;
/// each record is identical to the corresponding single-trajectory run.
/// `on_done(i, record)` is called once per trajectory, in no particular order.
void run_trajectory_batch(const LindbladGenerator& gen, const PureState& psi0, const SamplerMode& mode,
                          double horizon, std::span<RandomStream> streams,
                          std::span<const double> snapshot_times,
                          const std::function<void(std::size_t, TrajectoryRecord&&)>& on_done);

}  // namespace qjump
