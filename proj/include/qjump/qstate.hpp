#pragma once

#include <optional>
#include <variant>
#include <vector>

#include "qjump/types.hpp"

namespace qjump {

/// Self-adjoint operator on C^dim, stored dense or sparse depending on the
/// factory that built it. Conversion between the two is explicit.
class HermitianOperator {
public:
    /// Validates entries[j][k] == conj(entries[k][j]) up to 1e-12 * max|entry|.
    static HermitianOperator from_dense(Matrix m);
    static HermitianOperator from_sparse(SparseMatrix m);

    Index dim() const;
    bool is_sparse() const { return std::holds_alternative<SparseMatrix>(rep_); }
    Matrix to_dense() const;
    SparseMatrix to_sparse() const;

    Vector apply(const Vector& v) const;
    Matrix apply(const Matrix& m) const;

    double max_abs_entry() const;

private:
    explicit HermitianOperator(std::variant<Matrix, SparseMatrix> rep) : rep_(std::move(rep)) {}
    std::variant<Matrix, SparseMatrix> rep_;
};

/// Unit vector in C^dim.
class PureState {
public:
    /// Requires norm 1 within 1e-10.
    explicit PureState(Vector amplitudes);
    /// Scales any nonzero vector to unit norm.
    static PureState normalized(const Vector& v);

    Index dim() const { return amplitudes_.size(); }
    const Vector& amplitudes() const { return amplitudes_; }

private:
    Vector amplitudes_;
};

/// Orthogonal projection, carried as an orthonormal basis of its range.
/// A rank-1 projector is just one column; the dense matrix is built on demand.
class Projector {
public:
    static Projector from_vector(const Vector& v);
    /// Columns must be orthonormal within 1e-10.
    static Projector from_basis(Matrix basis);
    /// Validates P^2 = P and P = P* within 1e-10, then extracts the range.
    static Projector from_matrix(const Matrix& p);
    static Projector identity(Index dim);
    static Projector basis_vector(Index dim, Index k);

    Index dim() const { return basis_.rows(); }
    Index rank() const { return basis_.cols(); }
    const Matrix& basis() const { return basis_; }
    Matrix dense() const { return basis_ * basis_.adjoint(); }

    /// First column of the basis; the state vector for rank-1 projectors.
    Vector vector() const { return basis_.col(0); }

    /// Tr(this * other).
    double overlap(const Projector& other) const;
    /// Tr(this * rho) for a dense operator rho.
    double expectation_in(const Matrix& rho) const;

private:
    explicit Projector(Matrix basis) : basis_(std::move(basis)) {}
    Matrix basis_;
};

struct StateTolerances {
    double trace = 1e-9;
    double positivity = 1e-9;
    double hermiticity = 1e-12;
};

/// Hermitian, unit-trace, positive semidefinite matrix.
class DensityMatrix {
public:
    explicit DensityMatrix(Matrix m, const StateTolerances& tol = {});
    static DensityMatrix from_pure(const PureState& psi);
    /// rank^{-1} P.
    static DensityMatrix from_projector(const Projector& p);

    Index dim() const { return m_.rows(); }
    const Matrix& matrix() const { return m_; }
    double min_eigenvalue() const { return min_eigenvalue_; }
    double trace() const { return m_.trace().real(); }

private:
    Matrix m_;
    double min_eigenvalue_ = 0.0;
};

struct EigenBranch {
    double value;
    Projector projector;
};

struct SpectralBranch {
    double weight;  // p_delta, the eigenvalue
    Projector projector;

    double probability() const { return weight * static_cast<double>(projector.rank()); }
};

/// Branches sorted by strictly decreasing weight. Eigenvalues at or below the
/// floor are dropped and their total p*rank is kept in `residual`.
struct SpectralDecomposition {
    std::vector<SpectralBranch> branches;
    double residual = 0.0;

    double retained_probability() const;
};

inline constexpr double kEigenvalueFloor = 1e-14;
inline constexpr double kDefaultDegeneracyTol = 1e-10;

/// Eigenvalues sorted descending; eigenvalues within tol * ||H|| of their
/// neighbour are merged into one eigenprojector.
std::vector<EigenBranch> eigendecompose(const HermitianOperator& h, double degeneracy_tol);

SpectralDecomposition spectral_decompose(const DensityMatrix& rho,
                                         double degeneracy_tol = kDefaultDegeneracyTol);

/// Hermitian operator held as A * C * A^* with A tall (d x m) and C small
/// Hermitian (m x m). Used for the rank-deficient one-step states of the
/// trajectory engine.
struct FactoredHermitian {
    Matrix factor;  // A
    Matrix core;    // C
};

/// Same contract as the dense overload, computed in the range of the factor.
/// `trace_tol` bounds |sum p*rank + residual - 1|.
SpectralDecomposition spectral_decompose(const FactoredHermitian& rho,
                                         double degeneracy_tol = kDefaultDegeneracyTol,
                                         double trace_tol = 1e-6);

/// Tr(rho X).
double expectation(const DensityMatrix& rho, const HermitianOperator& x);

/// sqrt(Tr(rho X^2) - Tr(rho X)^2).
double uncertainty(const DensityMatrix& rho, const HermitianOperator& x);

/// Operator-norm distance ||A - B||.
double projector_distance(const Projector& a, const Projector& b);

/// 1/2 ||A - B||_1 for Hermitian A, B.
double trace_distance(const Matrix& a, const Matrix& b);

/// Largest |eigenvalue| of a Hermitian matrix.
double hermitian_norm(const Matrix& m);

/// Residual ||P^2 - P|| (Frobenius) of a dense matrix.
double idempotency_residual(const Matrix& p);

/// Groups an ascending eigen-pair list (as returned by Eigen) into branches
/// sorted by descending value; exposed for the trajectory engine.
std::vector<EigenBranch> group_eigenpairs(const RealVector& values, const Matrix& vectors,
                                          double abs_tol);

}  // namespace qjump
