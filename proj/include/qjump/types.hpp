#pragma once

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace qjump {

using Complex = std::complex<double>;
using Index = Eigen::Index;
using Matrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<Complex, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<Complex>;

inline constexpr Complex kI{0.0, 1.0};

// Dense density matrices (master equation, averaged ensemble snapshots) are
// only built up to this dimension.
inline constexpr Index kDenseLimit = 600;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Broken structural invariant of an operator or state (Hermiticity, trace,
// idempotency, ...).
class StructuralError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// A numerical consistency check failed (sign of a rate, PSD-ness, ...).
class NumericalError : public Error {
public:
    using Error::Error;
};

class IntegrationError : public NumericalError {
public:
    IntegrationError(long step, const std::string& what)
        : NumericalError("step " + std::to_string(step) + ": " + what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

class StepSizeError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ModeUnsupportedError : public Error {
public:
    using Error::Error;
};

inline void require_same_dim(Index a, Index b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                             " vs " + std::to_string(b) + ")");
    }
}

}  // namespace qjump
