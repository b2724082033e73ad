#pragma once

#include <random>

#include <doctest.h>

#include "qjump/doubleslit.hpp"
#include "qjump/ensemble.hpp"

namespace qjump::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& gen) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) {
            m(i, j) = Complex(n(gen), n(gen));
        }
    }
    return m;
}

inline Matrix random_hermitian(Index d, std::mt19937_64& gen) {
    const Matrix a = random_matrix(d, d, gen);
    return 0.5 * (a + a.adjoint());
}

inline Matrix random_density(Index d, std::mt19937_64& gen) {
    const Matrix a = random_matrix(d, d, gen);
    Matrix rho = a * a.adjoint();
    return rho / rho.trace().real();
}

inline Vector random_unit(Index d, std::mt19937_64& gen) {
    const Vector v = random_matrix(d, 1, gen).col(0);
    return v / v.norm();
}

inline Matrix pauli_x() {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 1) = m(1, 0) = 1.0;
    return m;
}

inline Matrix pauli_z() {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = 1.0;
    m(1, 1) = -1.0;
    return m;
}

inline SparseMatrix sparse(const Matrix& m) { return m.sparseView(); }

/// Amplitude damping: H = h, T = |1><0|.
inline LindbladGenerator two_level(double alpha, const Matrix& h = Matrix::Zero(2, 2)) {
    SparseMatrix t(2, 2);
    t.insert(1, 0) = Complex(1.0, 0.0);
    return LindbladGenerator(HermitianOperator::from_dense(h), alpha, {t});
}

/// The default 16x8 geometry with 8 pixels.
inline CavityGeometry small_geometry() {
    CavityGeometry g;
    g.shape = {8, 16};
    g.wall_column = 3;
    g.slits = {{2, 5}, {11, 14}};
    return g;
}

inline PixelArray small_pixels(const CavityGeometry& g, double range = 0.9) {
    return PixelArray::evenly_spaced(g, 8, range, 1.0);
}

inline PureState small_packet(const CavityGeometry& g) {
    return initial_wavepacket(g, 8, {2.0, 7.5, 0.0}, 1.3, {0.0, 0.0, 0.0});
}

/// Dense reference Lindbladian: -i[H, X] + alpha sum (T X T* - {T*T, X}/2).
inline Matrix dense_lindblad(const Matrix& h, double alpha, const std::vector<Matrix>& ts, const Matrix& x) {
    Matrix out = -kI * (h * x - x * h);
    for (const auto& t : ts) {
        const Matrix g = t.adjoint() * t;
        out += alpha * (t * x * t.adjoint() - 0.5 * (g * x + x * g));
    }
    return out;
}

}  // namespace qjump::testing
