#include "qjump/qstate.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace qjump {

namespace {

Eigen::SelfAdjointEigenSolver<Matrix> hermitian_eigen(const Matrix& m) {
    Matrix sym = 0.5 * (m + m.adjoint());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    if (solver.info() != Eigen::Success) {
        throw NumericalError("Hermitian eigensolver did not converge");
    }
    return solver;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace

// ---------------------------------------------------------------------------
// HermitianOperator

HermitianOperator HermitianOperator::from_dense(Matrix m) {
    if (m.rows() != m.cols() || m.rows() == 0) {
        throw StructuralError("Hermitian operator must be square and nonempty");
    }
    const double scale = max_abs(m);
    const double residual = max_abs(m - m.adjoint());
    if (residual > 1e-12 * scale) {
        throw StructuralError(fmt::format("operator is not Hermitian (residual {:.3e})", residual));
    }
    return HermitianOperator(std::move(m));
}

HermitianOperator HermitianOperator::from_sparse(SparseMatrix m) {
    if (m.rows() != m.cols() || m.rows() == 0) {
        throw StructuralError("Hermitian operator must be square and nonempty");
    }
    m.makeCompressed();
    SparseMatrix diff = m - SparseMatrix(m.adjoint());
    double residual = 0.0;
    double scale = 0.0;
    for (Index k = 0; k < diff.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(diff, k); it; ++it) {
            residual = std::max(residual, std::abs(it.value()));
        }
    }
    for (Index k = 0; k < m.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
            scale = std::max(scale, std::abs(it.value()));
        }
    }
    if (residual > 1e-12 * scale) {
        throw StructuralError(fmt::format("operator is not Hermitian (residual {:.3e})", residual));
    }
    return HermitianOperator(std::move(m));
}

Index HermitianOperator::dim() const {
    return std::visit([](const auto& m) -> Index { return m.rows(); }, rep_);
}

Matrix HermitianOperator::to_dense() const {
    if (const auto* d = std::get_if<Matrix>(&rep_)) {
        return *d;
    }
    return Matrix(std::get<SparseMatrix>(rep_));
}

SparseMatrix HermitianOperator::to_sparse() const {
    if (const auto* s = std::get_if<SparseMatrix>(&rep_)) {
        return *s;
    }
    return std::get<Matrix>(rep_).sparseView();
}

Vector HermitianOperator::apply(const Vector& v) const {
    require_same_dim(dim(), v.size(), "HermitianOperator::apply");
    return std::visit([&](const auto& m) -> Vector { return m * v; }, rep_);
}

Matrix HermitianOperator::apply(const Matrix& x) const {
    require_same_dim(dim(), x.rows(), "HermitianOperator::apply");
    return std::visit([&](const auto& m) -> Matrix { return m * x; }, rep_);
}

double HermitianOperator::max_abs_entry() const {
    if (const auto* d = std::get_if<Matrix>(&rep_)) {
        return max_abs(*d);
    }
    const auto& s = std::get<SparseMatrix>(rep_);
    double best = 0.0;
    for (Index k = 0; k < s.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(s, k); it; ++it) {
            best = std::max(best, std::abs(it.value()));
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// PureState

PureState::PureState(Vector amplitudes) : amplitudes_(std::move(amplitudes)) {
    if (amplitudes_.size() == 0) {
        throw StructuralError("pure state must be nonempty");
    }
    const double n = amplitudes_.norm();
    if (std::abs(n - 1.0) > 1e-10) {
        throw StructuralError(fmt::format("pure state norm {:.12f} is not 1", n));
    }
}

PureState PureState::normalized(const Vector& v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw StructuralError("cannot normalize a zero or non-finite vector");
    }
    return PureState(v / n);
}

// ---------------------------------------------------------------------------
// Projector

Projector Projector::from_vector(const Vector& v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw StructuralError("projector onto a zero vector");
    }
    return Projector(Matrix(v / n));
}

Projector Projector::from_basis(Matrix basis) {
    if (basis.cols() == 0 || basis.rows() < basis.cols()) {
        throw StructuralError("projector basis must have 1..dim columns");
    }
    const Matrix gram = basis.adjoint() * basis;
    const double residual = max_abs(gram - Matrix::Identity(gram.rows(), gram.cols()));
    if (residual > 1e-10) {
        throw StructuralError(fmt::format("projector basis not orthonormal (residual {:.3e})", residual));
    }
    return Projector(std::move(basis));
}

Projector Projector::from_matrix(const Matrix& p) {
    if (p.rows() != p.cols() || p.rows() == 0) {
        throw StructuralError("projector matrix must be square and nonempty");
    }
    if (max_abs(p - p.adjoint()) > 1e-10) {
        throw StructuralError("projector is not self-adjoint");
    }
    if (max_abs(p * p - p) > 1e-10) {
        throw StructuralError("projector is not idempotent");
    }
    const double tr = p.trace().real();
    const auto rank = static_cast<Index>(std::llround(tr));
    if (std::abs(tr - static_cast<double>(rank)) > 1e-6 || rank < 1) {
        throw StructuralError(fmt::format("projector trace {:.9f} is not a positive integer", tr));
    }
    auto solver = hermitian_eigen(p);
    // eigenvalues ascending: the range is spanned by the last `rank` vectors
    return Projector(solver.eigenvectors().rightCols(rank));
}

Projector Projector::identity(Index dim) { return Projector(Matrix::Identity(dim, dim)); }

Projector Projector::basis_vector(Index dim, Index k) {
    if (k < 0 || k >= dim) {
        throw DimensionError("basis vector index out of range");
    }
    Vector v = Vector::Zero(dim);
    v(k) = 1.0;
    return Projector(Matrix(v));
}

double Projector::overlap(const Projector& other) const {
    require_same_dim(dim(), other.dim(), "Projector::overlap");
    return (basis_.adjoint() * other.basis_).squaredNorm();
}

double Projector::expectation_in(const Matrix& rho) const {
    require_same_dim(dim(), rho.rows(), "Projector::expectation_in");
    return (basis_.adjoint() * rho * basis_).trace().real();
}

// ---------------------------------------------------------------------------
// DensityMatrix

DensityMatrix::DensityMatrix(Matrix m, const StateTolerances& tol) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() == 0) {
        throw StructuralError("density matrix must be square and nonempty");
    }
    const double herm = max_abs(m_ - m_.adjoint());
    if (herm > tol.hermiticity * std::max(1.0, max_abs(m_))) {
        throw StructuralError(fmt::format("density matrix is not Hermitian (residual {:.3e})", herm));
    }
    m_ = 0.5 * (m_ + m_.adjoint()).eval();
    const double tr = m_.trace().real();
    if (std::abs(tr - 1.0) > tol.trace) {
        throw StructuralError(fmt::format("density matrix trace {:.12f} differs from 1", tr));
    }
    min_eigenvalue_ = hermitian_eigen(m_).eigenvalues().minCoeff();
    if (min_eigenvalue_ < -tol.positivity) {
        throw StructuralError(
            fmt::format("density matrix has negative eigenvalue {:.3e}", min_eigenvalue_));
    }
}

DensityMatrix DensityMatrix::from_pure(const PureState& psi) {
    const Vector& v = psi.amplitudes();
    return DensityMatrix(v * v.adjoint());
}

DensityMatrix DensityMatrix::from_projector(const Projector& p) {
    return DensityMatrix(p.dense() / static_cast<double>(p.rank()));
}

// ---------------------------------------------------------------------------
// Spectral machinery

double SpectralDecomposition::retained_probability() const {
    double s = 0.0;
    for (const auto& b : branches) {
        s += b.probability();
    }
    return s;
}

std::vector<EigenBranch> group_eigenpairs(const RealVector& values, const Matrix& vectors,
                                          double abs_tol) {
    std::vector<EigenBranch> out;
    const Index n = values.size();
    Index hi = n - 1;
    while (hi >= 0) {
        Index lo = hi;
        while (lo - 1 >= 0 && values(lo) - values(lo - 1) <= abs_tol) {
            --lo;
        }
        const Index count = hi - lo + 1;
        const double mean = values.segment(lo, count).mean();
        out.push_back(EigenBranch{mean, Projector::from_basis(vectors.middleCols(lo, count))});
        hi = lo - 1;
    }
    return out;
}

std::vector<EigenBranch> eigendecompose(const HermitianOperator& h, double degeneracy_tol) {
    if (!(degeneracy_tol > 0.0)) {
        throw StructuralError("degeneracy tolerance must be positive");
    }
    auto solver = hermitian_eigen(h.to_dense());
    const RealVector& values = solver.eigenvalues();
    const double norm = values.cwiseAbs().maxCoeff();
    return group_eigenpairs(values, solver.eigenvectors(), degeneracy_tol * norm);
}

namespace {

SpectralDecomposition branches_from_eigen(const RealVector& values, const Matrix& vectors,
                                          double degeneracy_tol) {
    SpectralDecomposition out;
    const double norm = values.cwiseAbs().maxCoeff();
    for (auto& b : group_eigenpairs(values, vectors, degeneracy_tol * norm)) {
        if (b.value <= kEigenvalueFloor) {
            out.residual += b.value * static_cast<double>(b.projector.rank());
        } else {
            out.branches.push_back(SpectralBranch{b.value, std::move(b.projector)});
        }
    }
    return out;
}

void check_total_weight(const SpectralDecomposition& d, double tol) {
    const double total = d.retained_probability() + d.residual;
    if (std::abs(total - 1.0) > tol) {
        throw StructuralError(fmt::format("spectral weights sum to {:.12f}, not 1", total));
    }
}

}  // namespace

SpectralDecomposition spectral_decompose(const DensityMatrix& rho, double degeneracy_tol) {
    auto solver = hermitian_eigen(rho.matrix());
    auto out = branches_from_eigen(solver.eigenvalues(), solver.eigenvectors(), degeneracy_tol);
    check_total_weight(out, 1e-8);
    return out;
}

SpectralDecomposition spectral_decompose(const FactoredHermitian& rho, double degeneracy_tol,
                                         double trace_tol) {
    const Matrix& a = rho.factor;
    if (rho.core.rows() != a.cols() || rho.core.cols() != a.cols()) {
        throw DimensionError("factored operator: core does not match factor");
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(a);
    qr.setThreshold(1e-13);
    const Index r = qr.rank();
    if (r == 0) {
        throw StructuralError("factored operator has empty range");
    }
    const Matrix q = qr.householderQ() * Matrix::Identity(a.rows(), r);
    const Matrix rp = qr.matrixR().topRows(r).triangularView<Eigen::Upper>().toDenseMatrix() *
                      qr.colsPermutation().transpose();
    const Matrix reduced = rp * rho.core * rp.adjoint();
    auto solver = hermitian_eigen(reduced);
    const Matrix lifted = q * solver.eigenvectors();
    auto out = branches_from_eigen(solver.eigenvalues(), lifted, degeneracy_tol);
    check_total_weight(out, trace_tol);
    return out;
}

double expectation(const DensityMatrix& rho, const HermitianOperator& x) {
    require_same_dim(rho.dim(), x.dim(), "expectation");
    const Complex v = (rho.matrix() * x.to_dense()).trace();
    if (std::abs(v.imag()) > 1e-10) {
        throw NumericalError(fmt::format("expectation has imaginary part {:.3e}", v.imag()));
    }
    return v.real();
}

double uncertainty(const DensityMatrix& rho, const HermitianOperator& x) {
    require_same_dim(rho.dim(), x.dim(), "uncertainty");
    const Matrix xd = x.to_dense();
    const Matrix rx = rho.matrix() * xd;
    const double mean = rx.trace().real();
    const double second = (rx * xd).trace().real();
    const double radicand = second - mean * mean;
    if (radicand < -1e-12) {
        throw NumericalError(fmt::format("negative variance {:.3e}", radicand));
    }
    return std::sqrt(std::max(radicand, 0.0));
}

double projector_distance(const Projector& a, const Projector& b) {
    require_same_dim(a.dim(), b.dim(), "projector_distance");
    // A - B lives in span(range A, range B); work in an orthonormal basis of it.
    Matrix joint(a.dim(), a.rank() + b.rank());
    joint << a.basis(), b.basis();
    Eigen::ColPivHouseholderQR<Matrix> qr(joint);
    qr.setThreshold(1e-14);
    const Index r = std::max<Index>(qr.rank(), 1);
    const Matrix q = qr.householderQ() * Matrix::Identity(a.dim(), r);
    const Matrix pa = q.adjoint() * a.basis();
    const Matrix pb = q.adjoint() * b.basis();
    const Matrix diff = pa * pa.adjoint() - pb * pb.adjoint();
    return hermitian_norm(diff);
}

double trace_distance(const Matrix& a, const Matrix& b) {
    require_same_dim(a.rows(), b.rows(), "trace_distance");
    auto solver = hermitian_eigen(a - b);
    return 0.5 * solver.eigenvalues().cwiseAbs().sum();
}

double hermitian_norm(const Matrix& m) {
    if (m.size() == 0) {
        return 0.0;
    }
    return hermitian_eigen(m).eigenvalues().cwiseAbs().maxCoeff();
}

double idempotency_residual(const Matrix& p) { return (p * p - p).norm(); }

}  // namespace qjump
