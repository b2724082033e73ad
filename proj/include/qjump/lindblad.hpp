#pragma once

#include <optional>
#include <vector>

#include "qjump/qstate.hpp"

namespace qjump {

/// L[X] = -i[H, X] + alpha * sum_s (T_s X T_s^* - 1/2 {X, T_s^* T_s}), hbar = 1.
class LindbladGenerator {
public:
    LindbladGenerator(HermitianOperator hamiltonian, double alpha, std::vector<SparseMatrix> jump_ops);

    Index dim() const { return hamiltonian_.dim(); }
    double alpha() const { return alpha_; }
    const HermitianOperator& hamiltonian() const { return hamiltonian_; }
    const std::vector<SparseMatrix>& jump_operators() const { return jump_ops_; }

    /// sum_s T_s^* T_s, precomputed for dim <= kDenseLimit.
    const std::optional<Matrix>& jump_gram() const { return gram_; }

    /// Dense L[X]; X need not be a state.
    Matrix apply(const Matrix& x) const;

    /// (sum_s T_s^* T_s) v, applied through the jump operators.
    Vector gram_apply(const Vector& v) const;

    /// -i K v with K = H - (i alpha / 2) sum_s T_s^* T_s, the no-jump generator.
    Vector effective_apply(const Vector& v) const;

    /// L[v v^*] v for a unit vector v.
    Vector apply_rank1(const Vector& v) const;

    /// T_s v for every s.
    std::vector<Vector> jump_images(const Vector& v) const;

    /// sum_s T_s v <T_s v, v>, the part of L[v v^*] v fed by the jump terms.
    Vector jump_feedback(const Vector& v) const;

private:
    HermitianOperator hamiltonian_;
    double alpha_;
    std::vector<SparseMatrix> jump_ops_;
    std::vector<SparseMatrix> jump_adjoints_;
    // When the T_s have pairwise disjoint row supports, J = sum_s T_s gives
    // sum_s T_s^* T_s = J^* J, and row r of J v belongs to T_{row_owner_[r]}.
    std::optional<SparseMatrix> stacked_;
    std::optional<SparseMatrix> stacked_adjoint_;
    std::vector<int> row_owner_;
    std::optional<Matrix> gram_;
};

/// Checked L[X]: result is Hermitian and traceless within 1e-10 * ||X||_1.
HermitianOperator apply_generator(const LindbladGenerator& gen, const HermitianOperator& x);

struct MasterTrajectory {
    std::vector<double> times;
    std::vector<DensityMatrix> states;
    double max_trace_drift = 0.0;       // max_k |Tr(rho_k) - 1| over every step
    double min_eigenvalue = 0.0;        // smallest eigenvalue over the snapshots
};

/// Classical RK4 for d rho/dt = L[rho] with fixed step `dt` up to `t_end`.
/// Snapshots every `snapshot_every` steps plus the final step.
/// Throws IntegrationError when the trace drifts by more than 1e-6 or a
/// snapshot has an eigenvalue below -1e-6.
MasterTrajectory integrate_master(const LindbladGenerator& gen, const DensityMatrix& rho0, double dt,
                                  double t_end, long snapshot_every);

/// One classical RK4 step of the master equation.
Matrix master_rk4_step(const LindbladGenerator& gen, const Matrix& rho, double dt);

/// Tr(P L[P]) for a rank-1 projector; never positive.
double dissipation_rate(const LindbladGenerator& gen, const Projector& p);

/// Number of fixed steps of size dt covering [0, t_end]; throws unless t_end
/// is a whole number of steps (relative tolerance 1e-9).
long step_count(double dt, double t_end);

}  // namespace qjump
