#include "qjump/lindblad.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace qjump {

LindbladGenerator::LindbladGenerator(HermitianOperator hamiltonian, double alpha,
                                     std::vector<SparseMatrix> jump_ops)
    : hamiltonian_(std::move(hamiltonian)), alpha_(alpha), jump_ops_(std::move(jump_ops)) {
    if (!(alpha_ >= 0.0) || !std::isfinite(alpha_)) {
        throw StructuralError("coupling alpha must be finite and >= 0");
    }
    const Index d = hamiltonian_.dim();
    jump_adjoints_.reserve(jump_ops_.size());
    for (auto& t : jump_ops_) {
        if (t.rows() != d || t.cols() != d) {
            throw DimensionError(
                fmt::format("jump operator is {}x{}, generator dimension is {}", t.rows(), t.cols(), d));
        }
        t.makeCompressed();
        jump_adjoints_.emplace_back(t.adjoint());
    }
    if (jump_ops_.size() > 1) {
        std::vector<int> owner(static_cast<std::size_t>(d), -1);
        bool disjoint = true;
        for (std::size_t s = 0; s < jump_ops_.size() && disjoint; ++s) {
            const auto& t = jump_ops_[s];
            for (Index r = 0; r < t.outerSize(); ++r) {
                if (t.outerIndexPtr()[r + 1] == t.outerIndexPtr()[r]) {
                    continue;
                }
                if (owner[static_cast<std::size_t>(r)] >= 0) {
                    disjoint = false;
                    break;
                }
                owner[static_cast<std::size_t>(r)] = static_cast<int>(s);
            }
        }
        if (disjoint) {
            SparseMatrix j(d, d);
            for (const auto& t : jump_ops_) {
                j += t;
            }
            j.makeCompressed();
            stacked_adjoint_.emplace(j.adjoint());
            stacked_.emplace(std::move(j));
            row_owner_ = std::move(owner);
        }
    }
    if (d <= kDenseLimit) {
        Matrix g = Matrix::Zero(d, d);
        for (std::size_t s = 0; s < jump_ops_.size(); ++s) {
            g += Matrix(jump_adjoints_[s] * jump_ops_[s]);
        }
        if (!jump_ops_.empty()) {
            Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (g + g.adjoint()), Eigen::EigenvaluesOnly);
            const double lowest = solver.eigenvalues().minCoeff();
            if (lowest < -1e-10) {
                throw NumericalError(fmt::format("sum T*T is not PSD (eigenvalue {:.3e})", lowest));
            }
        }
        gram_ = std::move(g);
    }
}

Matrix LindbladGenerator::apply(const Matrix& x) const {
    require_same_dim(dim(), x.rows(), "LindbladGenerator::apply");
    // -i K X + (-i K X)^* + alpha sum T X T^*, with K the no-jump generator
    Matrix kx = -kI * hamiltonian_.apply(x);
    Matrix jumps = Matrix::Zero(x.rows(), x.cols());
    if (alpha_ > 0.0 && stacked_) {
        // sum_s T_s X T_s^* is J X J^* with the cross-operator blocks removed
        const Matrix jx = *stacked_ * x;
        kx.noalias() -= (0.5 * alpha_) * (*stacked_adjoint_ * jx);
        jumps = jx * *stacked_adjoint_;
        for (Index c = 0; c < jumps.cols(); ++c) {
            const int oc = row_owner_[static_cast<std::size_t>(c)];
            for (Index r = 0; r < jumps.rows(); ++r) {
                if (oc < 0 || row_owner_[static_cast<std::size_t>(r)] != oc) {
                    jumps(r, c) = Complex(0.0, 0.0);
                }
            }
        }
    } else if (alpha_ > 0.0) {
        for (std::size_t s = 0; s < jump_ops_.size(); ++s) {
            const Matrix tx = jump_ops_[s] * x;
            kx.noalias() -= (0.5 * alpha_) * (jump_adjoints_[s] * tx);
            jumps.noalias() += tx * jump_adjoints_[s];
        }
    }
    Matrix out = kx + kx.adjoint();
    out.noalias() += alpha_ * jumps;
    return out;
}

Vector LindbladGenerator::gram_apply(const Vector& v) const {
    if (stacked_) {
        return *stacked_adjoint_ * (*stacked_ * v);
    }
    Vector out = Vector::Zero(v.size());
    for (std::size_t s = 0; s < jump_ops_.size(); ++s) {
        out.noalias() += jump_adjoints_[s] * (jump_ops_[s] * v);
    }
    return out;
}

Vector LindbladGenerator::effective_apply(const Vector& v) const {
    require_same_dim(dim(), v.size(), "LindbladGenerator::effective_apply");
    Vector out = -kI * hamiltonian_.apply(v);
    if (alpha_ > 0.0 && !jump_ops_.empty()) {
        out.noalias() -= (0.5 * alpha_) * gram_apply(v);
    }
    return out;
}

Vector LindbladGenerator::apply_rank1(const Vector& v) const {
    require_same_dim(dim(), v.size(), "LindbladGenerator::apply_rank1");
    const Vector hv = hamiltonian_.apply(v);
    Vector out = -kI * (hv - v * v.dot(hv));
    if (alpha_ > 0.0) {
        const Vector gv = gram_apply(v);
        const Complex g_mean = v.dot(gv);
        out.noalias() += alpha_ * jump_feedback(v);
        out.noalias() -= (0.5 * alpha_) * (v * g_mean + gv);
    }
    return out;
}

Vector LindbladGenerator::jump_feedback(const Vector& v) const {
    require_same_dim(dim(), v.size(), "LindbladGenerator::jump_feedback");
    if (stacked_) {
        Vector y = *stacked_ * v;
        std::vector<Complex> overlap(jump_ops_.size(), Complex(0.0, 0.0));
        for (Index r = 0; r < y.size(); ++r) {
            if (const int s = row_owner_[static_cast<std::size_t>(r)]; s >= 0) {
                overlap[static_cast<std::size_t>(s)] += std::conj(y(r)) * v(r);
            }
        }
        for (Index r = 0; r < y.size(); ++r) {
            const int s = row_owner_[static_cast<std::size_t>(r)];
            y(r) = s >= 0 ? y(r) * overlap[static_cast<std::size_t>(s)] : Complex(0.0, 0.0);
        }
        return y;
    }
    Vector out = Vector::Zero(v.size());
    for (const auto& t : jump_ops_) {
        const Vector tv = t * v;
        out.noalias() += tv * tv.dot(v);
    }
    return out;
}

std::vector<Vector> LindbladGenerator::jump_images(const Vector& v) const {
    std::vector<Vector> out;
    out.reserve(jump_ops_.size());
    for (const auto& t : jump_ops_) {
        out.emplace_back(t * v);
    }
    return out;
}

HermitianOperator apply_generator(const LindbladGenerator& gen, const HermitianOperator& x) {
    require_same_dim(gen.dim(), x.dim(), "apply_generator");
    const Matrix xd = x.to_dense();
    Matrix out = gen.apply(xd);
    out = 0.5 * (out + out.adjoint()).eval();
    Eigen::SelfAdjointEigenSolver<Matrix> solver(xd, Eigen::EigenvaluesOnly);
    const double trace_norm = solver.eigenvalues().cwiseAbs().sum();
    const double tr = std::abs(out.trace());
    if (tr > 1e-10 * std::max(trace_norm, 1e-300)) {
        throw NumericalError(fmt::format("generator output has trace {:.3e}", tr));
    }
    return HermitianOperator::from_dense(std::move(out));
}

long step_count(double dt, double t_end) {
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw StepSizeError("time step must be positive");
    }
    if (!(t_end >= 0.0)) {
        throw StepSizeError("end time must be non-negative");
    }
    const double ratio = t_end / dt;
    const long n = std::lround(ratio);
    if (std::abs(ratio - static_cast<double>(n)) > 1e-9 * std::max(1.0, ratio)) {
        throw StepSizeError(fmt::format("end time {} is not a whole number of steps of {}", t_end, dt));
    }
    return n;
}

Matrix master_rk4_step(const LindbladGenerator& gen, const Matrix& rho, double dt) {
    const Matrix k1 = gen.apply(rho);
    const Matrix k2 = gen.apply(rho + (0.5 * dt) * k1);
    const Matrix k3 = gen.apply(rho + (0.5 * dt) * k2);
    const Matrix k4 = gen.apply(rho + dt * k3);
    return rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

MasterTrajectory integrate_master(const LindbladGenerator& gen, const DensityMatrix& rho0, double dt,
                                  double t_end, long snapshot_every) {
    require_same_dim(gen.dim(), rho0.dim(), "integrate_master");
    if (gen.dim() > kDenseLimit) {
        throw DimensionError(fmt::format(
            "dense master integration is limited to dim <= {} (got {}); use the trajectory engine",
            kDenseLimit, gen.dim()));
    }
    if (snapshot_every < 1) {
        throw StepSizeError("snapshot interval must be >= 1 step");
    }
    const long n = step_count(dt, t_end);
    if (n < 1) {
        throw StepSizeError("integration horizon must cover at least one step");
    }
    const StateTolerances checked{1e-6, 1e-6, 1e-9};

    MasterTrajectory out;
    out.times.push_back(0.0);
    out.states.push_back(rho0);
    out.min_eigenvalue = rho0.min_eigenvalue();
    out.max_trace_drift = std::abs(rho0.trace() - 1.0);

    Matrix rho = rho0.matrix();
    for (long k = 1; k <= n; ++k) {
        rho = master_rk4_step(gen, rho, dt);
        const double drift = std::abs(rho.trace().real() - 1.0);
        out.max_trace_drift = std::max(out.max_trace_drift, drift);
        if (drift > 1e-6 || !std::isfinite(drift)) {
            throw IntegrationError(k, fmt::format("trace drift {:.3e} exceeds 1e-6", drift));
        }
        if (k % snapshot_every == 0 || k == n) {
            try {
                out.states.emplace_back(rho, checked);
            } catch (const StructuralError& e) {
                throw IntegrationError(k, e.what());
            }
            out.times.push_back(static_cast<double>(k) * dt);
            out.min_eigenvalue = std::min(out.min_eigenvalue, out.states.back().min_eigenvalue());
        }
    }
    return out;
}

double dissipation_rate(const LindbladGenerator& gen, const Projector& p) {
    if (p.rank() != 1) {
        throw StructuralError("dissipation_rate needs a rank-1 projector");
    }
    require_same_dim(gen.dim(), p.dim(), "dissipation_rate");
    const Vector v = p.vector();
    const Complex rate = v.dot(gen.apply_rank1(v));
    if (rate.real() > 1e-12) {
        throw NumericalError(fmt::format("dissipation rate {:.3e} is positive", rate.real()));
    }
    return std::min(rate.real(), 0.0);
}

}  // namespace qjump
