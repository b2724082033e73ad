#include "qjump/unravel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace qjump {

SamplerMode SamplerMode::spectral_step(double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw StepSizeError("spectral-step dt must be positive");
    }
    return SamplerMode{Kind::kSpectralStep, dt, 0.0};
}

SamplerMode SamplerMode::waiting_time(double ode_dt, double bisection_tol) {
    if (!(ode_dt > 0.0) || !std::isfinite(ode_dt)) {
        throw StepSizeError("waiting-time ode dt must be positive");
    }
    if (!(bisection_tol > 0.0)) {
        throw StepSizeError("bisection tolerance must be positive");
    }
    return SamplerMode{Kind::kWaitingTime, ode_dt, bisection_tol};
}

const char* SamplerMode::name() const {
    return kind == Kind::kSpectralStep ? "spectral_step" : "waiting_time";
}

std::string default_target_label(const Projector& p) {
    if (p.rank() == 1) {
        Index k = 0;
        const double peak = p.vector().cwiseAbs2().maxCoeff(&k);
        if (peak >= 1.0 - 1e-9) {
            return fmt::format("e{}", k);
        }
    }
    return fmt::format("rank{}", p.rank());
}

std::string serialize(const TrajectoryRecord& rec, const TargetLabeler& label) {
    std::string out = fmt::format("# seed={},mode={},dt={:.17g},horizon={:.17g}\n", rec.seed, rec.mode.name(),
                                  rec.mode.dt, rec.horizon);
    out += "time,branchIndex,weight,targetLabel\n";
    for (const auto& e : rec.events) {
        out += fmt::format("{:.17g},{},{:.17g},{}\n", e.time, e.branch_index, e.weight, label(e.target));
    }
    out += fmt::format("# terminal={},end={:.17g}\n",
                       rec.terminal == TerminalKind::kJumpedTo ? "JUMPED_TO" : "SURVIVED_TO_HORIZON",
                       rec.end_time);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

// Upper bound on ||L[rho]|| from the rank-1 terms held in the one-step factor
// [V, -iKV, T_1 V, ...] (see one_step_factored).
double generator_norm_bound(const FactoredHermitian& f, double alpha, Index r) {
    const Index blocks = f.factor.cols() / r;
    double bound = 0.0;
    for (Index j = 0; j < r; ++j) {
        double b = 2.0 * f.factor.col(r + j).norm();
        for (Index s = 2; s < blocks; ++s) {
            b += alpha * f.factor.col(s * r + j).squaredNorm();
        }
        bound = std::max(bound, b);
    }
    return bound / static_cast<double>(r);
}

}  // namespace

DensityMatrix one_step_ensemble(const LindbladGenerator& gen, const Projector& p, double dt) {
    require_same_dim(gen.dim(), p.dim(), "one_step_ensemble");
    if (!(dt > 0.0)) {
        throw StepSizeError("dt must be positive");
    }
    if (gen.dim() > kDenseLimit) {
        throw DimensionError("one_step_ensemble builds a dense matrix; use one_step_decompose");
    }
    const Matrix rho = p.dense() / static_cast<double>(p.rank());
    const Matrix l = gen.apply(rho);
    Matrix next = rho + dt * l;
    next = 0.5 * (next + next.adjoint()).eval();
    const double lnorm = hermitian_norm(0.5 * (l + l.adjoint()));
    StateTolerances tol;
    tol.positivity = 10.0 * dt * dt * lnorm * lnorm + 1e-12;
    try {
        return DensityMatrix(std::move(next), tol);
    } catch (const StructuralError& e) {
        throw StepSizeError(fmt::format("one-step state rejected at dt={}: {}", dt, e.what()));
    }
}

FactoredHermitian one_step_factored(const LindbladGenerator& gen, const Projector& p, double dt) {
    require_same_dim(gen.dim(), p.dim(), "one_step_factored");
    // rho = V V^* / r, L[V V^*] = W V^* + V W^* + alpha sum (T V)(T V)^*, W = -i K V
    const Matrix& v = p.basis();
    const Index d = v.rows();
    const Index r = v.cols();
    std::vector<Matrix> images;
    if (gen.alpha() > 0.0) {
        for (const auto& t : gen.jump_operators()) {
            Matrix tv = t * v;
            if (tv.squaredNorm() > 0.0) {
                images.push_back(std::move(tv));
            }
        }
    }
    const Index blocks = 2 + static_cast<Index>(images.size());
    FactoredHermitian out;
    out.factor.resize(d, blocks * r);
    out.core = Matrix::Zero(blocks * r, blocks * r);
    out.factor.leftCols(r) = v;
    for (Index j = 0; j < r; ++j) {
        out.factor.col(r + j) = gen.effective_apply(v.col(j));
    }
    for (std::size_t s = 0; s < images.size(); ++s) {
        out.factor.middleCols((2 + static_cast<Index>(s)) * r, r) = images[s];
    }
    const double inv_r = 1.0 / static_cast<double>(r);
    const Matrix eye = Matrix::Identity(r, r);
    out.core.block(0, 0, r, r) = inv_r * eye;
    out.core.block(0, r, r, r) = (dt * inv_r) * eye;
    out.core.block(r, 0, r, r) = (dt * inv_r) * eye;
    for (Index b = 2; b < blocks; ++b) {
        out.core.block(b * r, b * r, r, r) = (gen.alpha() * dt * inv_r) * eye;
    }
    return out;
}

SpectralDecomposition one_step_decompose(const LindbladGenerator& gen, const Projector& p, double dt) {
    if (!(dt > 0.0)) {
        throw StepSizeError("dt must be positive");
    }
    const auto factored = one_step_factored(gen, p, dt);
    auto decomp = spectral_decompose(factored);
    const double bound = generator_norm_bound(factored, gen.alpha(), p.rank());
    const double allowance = 10.0 * dt * dt * bound * bound + 1e-12;
    if (decomp.residual < -allowance) {
        throw StepSizeError(
            fmt::format("one-step state has negative weight {:.3e} at dt={}", decomp.residual, dt));
    }
    return decomp;
}

std::size_t continuity_branch(const SpectralDecomposition& decomp, const Projector& ref) {
    if (decomp.branches.empty()) {
        throw StructuralError("empty spectral decomposition");
    }
    std::size_t best = 0;
    double best_overlap = -1.0;
    for (std::size_t b = 0; b < decomp.branches.size(); ++b) {
        const double o = decomp.branches[b].projector.overlap(ref);
        if (o > best_overlap) {
            best_overlap = o;
            best = b;
        }
    }
    return best;
}

namespace {

// Inverse-CDF table of one decomposition, built once and shared by every
// trajectory that sits in the pre-step state.
struct BranchTable {
    const SpectralDecomposition& decomp;
    std::size_t cont;
    std::vector<double> cumulative;
    double total = 0.0;

    BranchTable(const SpectralDecomposition& d, std::size_t continuity) : decomp(d), cont(continuity) {
        cumulative.reserve(d.branches.size());
        for (const auto& b : d.branches) {
            total += b.probability();
            cumulative.push_back(total);
        }
        if (std::abs(total + d.residual - 1.0) > 1e-6 || !(total > 0.0)) {
            throw StructuralError(fmt::format("branch probabilities sum to {:.12f}", total + d.residual));
        }
    }

    std::size_t pick(double u) const {
        const double target = u * total;
        for (std::size_t b = 0; b < cumulative.size(); ++b) {
            if (target < cumulative[b]) {
                return b;
            }
        }
        return cumulative.size() - 1;
    }

    BranchChoice choice(std::size_t b) const {
        int index = 0;
        if (b != cont) {
            index = static_cast<int>(b < cont ? b + 1 : b);
        }
        const auto& br = decomp.branches[b];
        return BranchChoice{index, br.projector, br.probability() / total};
    }
};

BranchChoice select_with(const SpectralDecomposition& decomp, std::size_t cont, double u) {
    const BranchTable table(decomp, cont);
    return table.choice(table.pick(u));
}

}  // namespace

BranchChoice select_branch(const SpectralDecomposition& decomp, const Projector& continuity_ref, double u) {
    return select_with(decomp, continuity_branch(decomp, continuity_ref), u);
}

BranchChoice select_branch(const SpectralDecomposition& decomp, const Projector& continuity_ref,
                           RandomStream& rng) {
    return select_branch(decomp, continuity_ref, rng.uniform());
}

// ---------------------------------------------------------------------------

namespace {

// psi' = ||psi|| (g - u <u|g>), u = psi / ||psi||, g = L[uu^*] u
Vector projector_flow(const LindbladGenerator& gen, const Vector& psi) {
    const double n = psi.norm();
    const Vector u = psi / n;
    const Vector g = gen.apply_rank1(u);
    return n * (g - u * u.dot(g));
}

void require_rank1(const Projector& p, const char* what) {
    if (p.rank() != 1) {
        throw StructuralError(fmt::format("{} needs a rank-1 projector (got rank {})", what, p.rank()));
    }
}

}  // namespace

NoJumpPath no_jump_evolve(const LindbladGenerator& gen, const Projector& p0, double dt, double t_end) {
    require_rank1(p0, "no_jump_evolve");
    require_same_dim(gen.dim(), p0.dim(), "no_jump_evolve");
    const long n = step_count(dt, t_end);
    NoJumpPath path;
    path.times.reserve(static_cast<std::size_t>(n) + 1);
    path.states.reserve(static_cast<std::size_t>(n) + 1);
    Vector psi = p0.vector();
    path.times.push_back(0.0);
    path.states.push_back(p0);
    for (long k = 1; k <= n; ++k) {
        const Vector k1 = projector_flow(gen, psi);
        const Vector k2 = projector_flow(gen, psi + (0.5 * dt) * k1);
        const Vector k3 = projector_flow(gen, psi + (0.5 * dt) * k2);
        const Vector k4 = projector_flow(gen, psi + dt * k3);
        psi += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        // ||P^2 - P|| for P = psi psi^*
        const double n2 = psi.squaredNorm();
        const double residual = std::abs(n2 - 1.0) * n2;
        if (residual > 1e-6 || !std::isfinite(residual)) {
            throw StepSizeError(fmt::format("idempotency residual {:.3e} at step {}", residual, k));
        }
        if (residual > 1e-10) {
            path.max_correction = std::max(path.max_correction, residual);
            ++path.corrections;
        }
        psi /= std::sqrt(n2);
        path.times.push_back(static_cast<double>(k) * dt);
        path.states.push_back(Projector::from_vector(psi));
    }
    return path;
}

NoJumpPath no_jump_evolve_matrix(const LindbladGenerator& gen, const Projector& p0, double dt,
                                 double t_end) {
    require_rank1(p0, "no_jump_evolve_matrix");
    require_same_dim(gen.dim(), p0.dim(), "no_jump_evolve_matrix");
    if (gen.dim() > kDenseLimit) {
        throw DimensionError("no_jump_evolve_matrix is a dense reference path");
    }
    const long n = step_count(dt, t_end);
    const Index d = gen.dim();
    const Matrix eye = Matrix::Identity(d, d);
    auto flow = [&](const Matrix& p) -> Matrix {
        const Matrix l = gen.apply(p);
        const Matrix lp = (eye - p) * l * p;
        return lp + lp.adjoint();
    };
    auto as_projector = [](const Matrix& p) {
        Index j = 0;
        const double pjj = p.diagonal().real().maxCoeff(&j);
        return Projector::from_vector(p.col(j) / std::sqrt(pjj));
    };
    NoJumpPath path;
    Matrix p = p0.dense();
    path.times.push_back(0.0);
    path.states.push_back(p0);
    for (long k = 1; k <= n; ++k) {
        const Matrix k1 = flow(p);
        const Matrix k2 = flow(p + (0.5 * dt) * k1);
        const Matrix k3 = flow(p + (0.5 * dt) * k2);
        const Matrix k4 = flow(p + dt * k3);
        p += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        const double residual = idempotency_residual(p);
        if (residual > 1e-6 || !std::isfinite(residual)) {
            throw StepSizeError(fmt::format("idempotency residual {:.3e} at step {}", residual, k));
        }
        Projector state = as_projector(p);
        if (residual > 1e-10) {
            Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (p + p.adjoint()));
            state = Projector::from_vector(solver.eigenvectors().col(d - 1));
            p = state.dense();
            path.max_correction = std::max(path.max_correction, residual);
            ++path.corrections;
        }
        path.times.push_back(static_cast<double>(k) * dt);
        path.states.push_back(std::move(state));
    }
    return path;
}

double no_jump_survival(const LindbladGenerator& gen, const NoJumpPath& path) {
    if (path.times.size() != path.states.size() || path.times.empty()) {
        throw StructuralError("malformed no-jump path");
    }
    double integral = 0.0;
    double prev = dissipation_rate(gen, path.states.front());
    for (std::size_t k = 1; k < path.times.size(); ++k) {
        const double cur = dissipation_rate(gen, path.states[k]);
        integral += 0.5 * (path.times[k] - path.times[k - 1]) * (prev + cur);
        prev = cur;
    }
    const double p = std::exp(integral);
    if (p > 1.0 + 1e-9) {
        throw NumericalError(fmt::format("survival probability {} exceeds 1", p));
    }
    return std::min(p, 1.0);
}

std::vector<JumpChannel> jump_spectrum(const LindbladGenerator& gen, const Projector& p) {
    require_rank1(p, "jump_spectrum");
    require_same_dim(gen.dim(), p.dim(), "jump_spectrum");
    std::vector<JumpChannel> out;
    if (gen.alpha() == 0.0) {
        return out;
    }
    const Vector psi = p.vector();
    // u_s = Pi^perp T_s psi; the operator is alpha U U^*, whose nonzero
    // spectrum is that of the Gram matrix alpha U^* U.
    std::vector<Vector> u;
    for (const auto& t : gen.jump_operators()) {
        Vector ts = t * psi;
        ts -= psi * psi.dot(ts);
        if (ts.squaredNorm() > 0.0) {
            u.push_back(std::move(ts));
        }
    }
    const Index m = static_cast<Index>(u.size());
    Matrix gram(m, m);
    double trace = 0.0;
    for (Index a = 0; a < m; ++a) {
        for (Index b = a; b < m; ++b) {
            gram(a, b) = gen.alpha() * u[a].dot(u[b]);
            gram(b, a) = std::conj(gram(a, b));
        }
        trace += gram(a, a).real();
    }
    // Connected components of the nonzero pattern: orthogonal channel images
    // stay exactly separate (and exactly aligned with their T_s range).
    std::vector<Index> comp(m, -1);
    Index ncomp = 0;
    for (Index a = 0; a < m; ++a) {
        if (comp[a] >= 0) {
            continue;
        }
        std::vector<Index> stack{a};
        comp[a] = ncomp;
        while (!stack.empty()) {
            const Index x = stack.back();
            stack.pop_back();
            for (Index y = 0; y < m; ++y) {
                if (comp[y] < 0 && gram(x, y) != Complex(0.0)) {
                    comp[y] = ncomp;
                    stack.push_back(y);
                }
            }
        }
        ++ncomp;
    }
    const double floor = kEigenvalueFloor * std::max(trace, 1e-300);
    for (Index c = 0; c < ncomp; ++c) {
        std::vector<Index> members;
        for (Index a = 0; a < m; ++a) {
            if (comp[a] == c) {
                members.push_back(a);
            }
        }
        const Index k = static_cast<Index>(members.size());
        if (k == 1) {
            const Index a = members[0];
            const double rate = gram(a, a).real();
            if (rate > floor) {
                out.push_back(JumpChannel{rate, Projector::from_vector(u[a] / u[a].norm())});
            }
            continue;
        }
        Matrix sub(k, k);
        for (Index i = 0; i < k; ++i) {
            for (Index j = 0; j < k; ++j) {
                sub(i, j) = gram(members[i], members[j]);
            }
        }
        Eigen::SelfAdjointEigenSolver<Matrix> solver(sub);
        const RealVector& ev = solver.eigenvalues();
        if (ev(0) < -1e-10 * std::max(trace, 1.0)) {
            throw NumericalError(fmt::format("jump operator has negative eigenvalue {:.3e}", ev(0)));
        }
        // eigenvalues within the degeneracy tolerance share one eigenprojector
        const double tol = kDefaultDegeneracyTol * std::max(ev(k - 1), 1e-300);
        for (Index hi = k - 1; hi >= 0;) {
            Index lo = hi;
            while (lo > 0 && ev(hi) - ev(lo - 1) <= tol) {
                --lo;
            }
            const Index count = hi - lo + 1;
            double rate = 0.0;
            Matrix basis(psi.size(), count);
            for (Index e = lo; e <= hi; ++e) {
                rate += ev(e);
                Vector target = Vector::Zero(psi.size());
                for (Index i = 0; i < k; ++i) {
                    target += solver.eigenvectors()(i, e) * u[members[i]];
                }
                basis.col(e - lo) = target / target.norm();
            }
            if (ev(hi) > floor && count == 1) {
                out.push_back(JumpChannel{rate, Projector::from_vector(basis.col(0))});
            } else if (ev(hi) > floor) {
                // images of distinct eigenvectors are orthogonal up to rounding
                const Eigen::HouseholderQR<Matrix> qr(basis);
                const Matrix q = qr.householderQ() * Matrix::Identity(psi.size(), count);
                out.push_back(JumpChannel{rate, Projector::from_basis(q)});
            }
            hi = lo - 1;
        }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const JumpChannel& a, const JumpChannel& b) { return a.rate > b.rate; });
    return out;
}

namespace {

// For the linear flow psi' = A psi a classical RK4 step of length tau is the
// degree-4 Taylor polynomial sum_m tau^m / m! A^m psi, so one set of powers
// serves every substep length inside a step.
struct TaylorStep {
    std::array<Vector, 5> v;
    std::array<double, 9> norm_coeff{};  // ||psi(tau)||^2 = sum_j c_j tau^j

    TaylorStep(const LindbladGenerator& gen, const Vector& psi) {
        static constexpr std::array<double, 5> inv_fact{1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0};
        v[0] = psi;
        for (int m = 1; m < 5; ++m) {
            v[m] = gen.effective_apply(v[m - 1]);
        }
        for (int m = 0; m < 5; ++m) {
            for (int n = 0; n < 5; ++n) {
                norm_coeff[m + n] += inv_fact[m] * inv_fact[n] * v[m].dot(v[n]).real();
            }
        }
    }

    Vector at(double tau) const {
        Vector out = v[4] * (1.0 / 24.0);
        out = v[3] * (1.0 / 6.0) + tau * out;
        out = v[2] * 0.5 + tau * out;
        out = v[1] + tau * out;
        return v[0] + tau * out;
    }

    double norm2(double tau) const {
        double acc = norm_coeff[8];
        for (int j = 7; j >= 0; --j) {
            acc = norm_coeff[j] + tau * acc;
        }
        return acc;
    }
};

}  // namespace

Vector effective_rk4_step(const LindbladGenerator& gen, const Vector& psi, double h) {
    return TaylorStep(gen, psi).at(h);
}

bool is_stationary(const LindbladGenerator& gen, const Projector& p, double tol) {
    require_same_dim(gen.dim(), p.dim(), "is_stationary");
    const Matrix& v = p.basis();
    const double scale = std::max(1.0, gen.hamiltonian().max_abs_entry());
    for (const auto& t : gen.jump_operators()) {
        if (gen.alpha() > 0.0 && (t * v).norm() > tol * scale) {
            return false;
        }
    }
    const Matrix hv = gen.hamiltonian().apply(v);
    return (hv - v * (v.adjoint() * hv)).norm() <= tol * scale;
}

void check_waiting_premise(const LindbladGenerator& gen, const Vector& unit_psi) {
    Vector x = gen.jump_feedback(unit_psi);
    x -= unit_psi * unit_psi.dot(x);
    const double defect = gen.alpha() * x.norm();
    if (defect > 1e-12) {
        throw ModeUnsupportedError(fmt::format(
            "jump terms feed back into the no-jump state (defect {:.3e}); use the spectral-step sampler",
            defect));
    }
}

// ---------------------------------------------------------------------------
// Trajectory engine. A group of trajectories sharing one state is advanced
// together; a trajectory leaves the group when it jumps and, unless its
// target is stationary, continues as a group of one. A single trajectory is
// a batch of size one, so batched and individual runs share all arithmetic.

namespace {

struct Engine {
    const LindbladGenerator& gen;
    SamplerMode mode;
    double horizon;
    std::span<RandomStream> streams;
    std::vector<double> snap_times;
    std::vector<long> snap_steps;  // spectral mode only
    std::vector<TrajectoryRecord> records;
    const std::function<void(std::size_t, TrajectoryRecord&&)>& on_done;

    double time_tol() const { return 1e-12 * std::max(1.0, horizon); }

    void record_snapshot(std::size_t i, double time, const Projector& state) {
        records[i].snapshots.push_back(StateSnapshot{time, state});
    }

    void finish(std::size_t i, TerminalKind kind, double end_time, const Projector& state) {
        auto& rec = records[i];
        while (rec.snapshots.size() < snap_times.size()) {
            rec.snapshots.push_back(StateSnapshot{snap_times[rec.snapshots.size()], state});
        }
        rec.terminal = kind;
        rec.end_time = end_time;
        on_done(i, std::move(rec));
        rec = TrajectoryRecord{};
    }

    // --- spectral step ---------------------------------------------------
    void spectral(Projector state, long k0, std::vector<std::size_t> active) {
        const double dt = mode.dt;
        const long n = step_count(dt, horizon);
        for (long k = k0; k < n && !active.empty(); ++k) {
            for (std::size_t i : active) {
                while (records[i].snapshots.size() < snap_times.size() &&
                       snap_steps[records[i].snapshots.size()] <= k) {
                    record_snapshot(i, snap_times[records[i].snapshots.size()], state);
                }
            }
            const auto decomp = one_step_decompose(gen, state, dt);
            const std::size_t cont = continuity_branch(decomp, state);
            const BranchTable table(decomp, cont);
            const double t = static_cast<double>(k + 1) * dt;
            std::vector<std::size_t> still;
            still.reserve(active.size());
            for (std::size_t i : active) {
                const std::size_t b = table.pick(streams[i].uniform());
                if (b == cont) {
                    still.push_back(i);
                    continue;
                }
                const auto choice = table.choice(b);
                records[i].events.push_back(JumpEvent{t, choice.branch_index, choice.state, choice.probability});
                if (is_stationary(gen, choice.state)) {
                    finish(i, TerminalKind::kJumpedTo, t, choice.state);
                } else {
                    spectral(choice.state, k + 1, {i});
                }
            }
            active = std::move(still);
            state = decomp.branches[cont].projector;
        }
        for (std::size_t i : active) {
            finish(i, TerminalKind::kSurvivedToHorizon, static_cast<double>(n) * dt, state);
        }
    }

    // --- waiting time ----------------------------------------------------
    void waiting(const Vector& start, double t0, std::vector<std::size_t> active) {
        const double h = mode.dt;
        const double tol = time_tol();
        const Projector start_state = Projector::from_vector(start);
        for (std::size_t i : active) {
            while (records[i].snapshots.size() < snap_times.size() &&
                   snap_times[records[i].snapshots.size()] <= t0 + tol) {
                record_snapshot(i, snap_times[records[i].snapshots.size()], start_state);
            }
        }
        // thresholds; trajectories with the largest u jump first
        std::vector<std::pair<double, std::size_t>> queue;
        queue.reserve(active.size());
        for (std::size_t i : active) {
            queue.emplace_back(streams[i].uniform(), i);
        }
        std::stable_sort(queue.begin(), queue.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::size_t next = 0;

        Vector psi = start;
        for (long k = 0; next < queue.size(); ++k) {
            const double t = t0 + static_cast<double>(k) * h;
            const double s = std::min(h, horizon - t);
            if (s <= tol) {
                break;
            }
            const double n0 = psi.norm();
            check_waiting_premise(gen, psi / n0);
            const TaylorStep step(gen, psi);
            const Vector psi_next = step.at(s);
            const double n_next = psi_next.squaredNorm();

            // snapshot times inside (t, t + s]
            std::vector<std::pair<double, Projector>> inside;
            for (double tau : snap_times) {
                if (tau > t + tol && tau <= t + s + tol) {
                    const Vector x = std::abs(tau - (t + s)) <= tol ? psi_next : step.at(tau - t);
                    inside.emplace_back(tau, Projector::from_vector(x / x.norm()));
                }
            }

            while (next < queue.size() && queue[next].first >= n_next) {
                const auto [u, i] = queue[next++];
                double lo = 0.0;
                double hi = s;
                while (hi - lo > mode.bisection_tol) {
                    const double mid = 0.5 * (lo + hi);
                    if (step.norm2(mid) <= u) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                const double tj = t + hi;
                for (const auto& [tau, st] : inside) {
                    if (tau < tj && records[i].snapshots.size() < snap_times.size() &&
                        snap_times[records[i].snapshots.size()] == tau) {
                        record_snapshot(i, tau, st);
                    }
                }
                const Vector at = step.at(hi);
                const auto channels = jump_spectrum(gen, Projector::from_vector(at / at.norm()));
                if (channels.empty()) {
                    throw NumericalError(fmt::format("no jump channel open at t={}", tj));
                }
                double total = 0.0;
                for (const auto& c : channels) {
                    total += c.rate;
                }
                const double v = streams[i].uniform() * total;
                double acc = 0.0;
                std::size_t pick = channels.size() - 1;
                for (std::size_t c = 0; c < channels.size(); ++c) {
                    acc += channels[c].rate;
                    if (v < acc) {
                        pick = c;
                        break;
                    }
                }
                const auto& target = channels[pick].target;
                records[i].events.push_back(
                    JumpEvent{tj, static_cast<int>(pick) + 1, target, channels[pick].rate / total});
                if (is_stationary(gen, target)) {
                    finish(i, TerminalKind::kJumpedTo, tj, target);
                } else if (target.rank() != 1) {
                    throw ModeUnsupportedError(fmt::format(
                        "jump at t={} into a rank-{} state; the waiting-time sampler follows rank-1 states only, "
                        "use spectral_step",
                        tj, target.rank()));
                } else {
                    waiting(target.vector(), tj, {i});
                }
            }
            for (std::size_t q = next; q < queue.size(); ++q) {
                const std::size_t i = queue[q].second;
                for (const auto& [tau, st] : inside) {
                    record_snapshot(i, tau, st);
                }
            }
            psi = psi_next;
        }
        const Projector end_state = Projector::from_vector(psi / psi.norm());
        for (std::size_t q = next; q < queue.size(); ++q) {
            finish(queue[q].second, TerminalKind::kSurvivedToHorizon, horizon, end_state);
        }
    }
};

std::vector<double> checked_snapshots(std::span<const double> times, double horizon) {
    std::vector<double> out(times.begin(), times.end());
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (!(out[k] >= 0.0) || out[k] > horizon * (1.0 + 1e-12)) {
            throw ConfigError(fmt::format("snapshot time {} outside [0, {}]", out[k], horizon));
        }
        if (k > 0 && !(out[k] > out[k - 1])) {
            throw ConfigError("snapshot times must be strictly increasing");
        }
    }
    return out;
}

void run_engine(const LindbladGenerator& gen, const PureState& psi0, const SamplerMode& mode,
                double horizon, std::span<RandomStream> streams, std::span<const double> snapshot_times,
                const std::function<void(std::size_t, TrajectoryRecord&&)>& on_done) {
    require_same_dim(gen.dim(), psi0.dim(), "trajectory");
    if (!(horizon >= 0.0) || !std::isfinite(horizon)) {
        throw ConfigError("horizon must be finite and >= 0");
    }
    Engine engine{gen, mode, horizon, streams, checked_snapshots(snapshot_times, horizon), {}, {}, on_done};
    engine.records.resize(streams.size());
    std::vector<std::size_t> all(streams.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t i = 0; i < streams.size(); ++i) {
        engine.records[i].seed = streams[i].key();
        engine.records[i].mode = mode;
        engine.records[i].horizon = horizon;
    }
    if (mode.kind == SamplerMode::Kind::kSpectralStep) {
        step_count(mode.dt, horizon);
        for (double tau : engine.snap_times) {
            engine.snap_steps.push_back(step_count(mode.dt, tau));
        }
        engine.spectral(Projector::from_vector(psi0.amplitudes()), 0, std::move(all));
    } else {
        engine.waiting(psi0.amplitudes(), 0.0, std::move(all));
    }
}

}  // namespace

TrajectoryRecord run_trajectory_spectral(const LindbladGenerator& gen, const PureState& psi0, double dt,
                                         double horizon, RandomStream& rng,
                                         std::span<const double> snapshot_times) {
    TrajectoryRecord out;
    run_engine(gen, psi0, SamplerMode::spectral_step(dt), horizon, std::span<RandomStream>(&rng, 1),
               snapshot_times, [&](std::size_t, TrajectoryRecord&& r) { out = std::move(r); });
    return out;
}

TrajectoryRecord run_trajectory_waiting(const LindbladGenerator& gen, const PureState& psi0,
                                        const SamplerMode& mode, double horizon, RandomStream& rng,
                                        std::span<const double> snapshot_times) {
    if (mode.kind != SamplerMode::Kind::kWaitingTime) {
        throw ConfigError("run_trajectory_waiting needs a waiting-time sampler mode");
    }
    TrajectoryRecord out;
    run_engine(gen, psi0, mode, horizon, std::span<RandomStream>(&rng, 1), snapshot_times,
               [&](std::size_t, TrajectoryRecord&& r) { out = std::move(r); });
    return out;
}

void run_trajectory_batch(const LindbladGenerator& gen, const PureState& psi0, const SamplerMode& mode,
                          double horizon, std::span<RandomStream> streams,
                          std::span<const double> snapshot_times,
                          const std::function<void(std::size_t, TrajectoryRecord&&)>& on_done) {
    run_engine(gen, psi0, mode, horizon, streams, snapshot_times, on_done);
}

}  // namespace qjump
