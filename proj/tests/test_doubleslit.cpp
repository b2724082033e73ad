#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace qjump;
using namespace qjump::testing;

namespace {

std::vector<bool> face_mask(const CavityGeometry& g) {
    std::vector<bool> m(static_cast<std::size_t>(g.grid_size()), false);
    for (Index ix = 0; ix < g.nx(); ++ix) {
        for (Index iy = 0; iy < g.ny(); ++iy) {
            m[static_cast<std::size_t>(g.index(ix, iy, 0))] = ix == 0 || iy == 0 || iy == g.ny() - 1;
        }
    }
    return m;
}

}  // namespace

TEST_SUITE("doubleslit") {

TEST_CASE("Dirichlet chain spectrum") {
    SUBCASE("three interior points") {
        const SparseMatrix l = stencil_laplacian({5}, 1.0, {true, false, false, false, true}, false);
        const Matrix block = Matrix(l).block(1, 1, 3, 3);
        CHECK(block(0, 0).real() == doctest::Approx(1.0));
        CHECK(block(0, 1).real() == doctest::Approx(-0.5));
        CHECK(std::abs(block(0, 2)) == 0.0);
        Eigen::SelfAdjointEigenSolver<Matrix> es(block);
        CHECK(es.eigenvalues()(0) == doctest::Approx(1.0 - std::cos(M_PI / 4.0)).epsilon(1e-12));
    }
    SUBCASE("m interior points, spacing h") {
        const Index m = 9;
        const double h = 0.5;
        std::vector<bool> mask(static_cast<std::size_t>(m + 2), false);
        mask.front() = mask.back() = true;
        const Matrix block = Matrix(stencil_laplacian({m + 2}, h, mask, false)).block(1, 1, m, m);
        Eigen::SelfAdjointEigenSolver<Matrix> es(block);
        for (Index k = 1; k <= m; ++k) {
            const double exact = (1.0 - std::cos(static_cast<double>(k) * M_PI / static_cast<double>(m + 1))) / (h * h);
            CHECK(std::abs(es.eigenvalues()(k - 1) - exact) < 1e-10);
        }
    }
}

TEST_CASE("Hamiltonian structure") {
    const auto g = small_geometry();
    const SparseMatrix h = build_hamiltonian(g).to_sparse();
    CHECK((SparseMatrix(h.adjoint()) - h).norm() == 0.0);
    const auto mask = g.dirichlet_mask();
    double masked = 0.0;
    for (Index r = 0; r < h.outerSize(); ++r) {
        for (SparseMatrix::InnerIterator it(h, r); it; ++it) {
            CHECK(it.value().imag() == 0.0);
            if (mask[static_cast<std::size_t>(it.row())] || mask[static_cast<std::size_t>(it.col())]) {
                masked += std::abs(it.value());
            }
        }
    }
    CHECK(masked == 0.0);
}

TEST_CASE("Neumann closure on the screen face") {
    // interior screen cell: diagonal (2 dims - 1) c, one missing neighbour
    const auto g = small_geometry();
    const Matrix h = build_hamiltonian(g).to_dense();
    const Index i = g.index(g.nx() - 1, 7, 0);
    CHECK(h(i, i).real() == doctest::Approx(1.5));
    CHECK(h(i, g.index(g.nx() - 2, 7, 0)).real() == doctest::Approx(-0.5));
    // the mirror closure keeps the constant mode free along x: row sums vanish away from Dirichlet neighbours
    CHECK(h.row(i).sum().real() == doctest::Approx(0.0));
}

TEST_CASE("a closed barrier decouples the chambers") {
    auto g = small_geometry();
    g.slits.clear();
    const SparseMatrix h = build_hamiltonian(g).to_sparse();
    for (Index r = 0; r < h.outerSize(); ++r) {
        for (SparseMatrix::InnerIterator it(h, r); it; ++it) {
            const bool left_r = it.row() / g.ny() < g.wall_column;
            const bool left_c = it.col() / g.ny() < g.wall_column;
            CHECK(left_r == left_c);
        }
    }
    // only the kernel tails reach into the closed gun chamber
    const auto open_model = build_model(small_geometry(), small_pixels(g));
    const auto model = build_model(g, small_pixels(g));
    const auto rho0 = DensityMatrix::from_pure(small_packet(g));
    const auto closed = integrate_master(assemble_generator(model, 1.0), rho0, 0.05, 20.0, 400);
    const auto open = integrate_master(assemble_generator(open_model, 1.0), rho0, 0.05, 20.0, 400);
    const double leaked = pixel_populations(model, closed.states.back()).sum();
    CHECK(leaked < 0.01 * pixel_populations(open_model, open.states.back()).sum());

    // with kernels truncated before the gun chamber (5 cells away) nothing gets through
    const auto tight = build_model(g, small_pixels(g, 0.15));
    for (const auto& s : integrate_master(assemble_generator(tight, 1.0), rho0, 0.05, 20.0, 40).states) {
        CHECK(pixel_populations(tight, s).maxCoeff() <= 1e-12);
    }
}

TEST_CASE("no barrier reproduces the plain box") {
    auto g = small_geometry();
    g.barrier = false;
    g.slits.clear();
    const SparseMatrix a = build_hamiltonian(g).to_sparse();
    const SparseMatrix b = stencil_laplacian(g.shape, g.spacing, face_mask(g), true);
    CHECK((a - b).norm() == 0.0);
}

TEST_CASE("geometry validation") {
    auto g = small_geometry();
    CHECK_NOTHROW(g.validate());
    g.slits = {{2, 6}, {5, 8}};
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = small_geometry();
    g.wall_column = 0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = small_geometry();
    g.slits = {{0, 3}};
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = small_geometry();
    g.slits = {{4, 4}};
    CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("pixel kernels") {
    auto g = small_geometry();
    SUBCASE("point-contact limit") {
        const auto px = PixelArray::evenly_spaced(g, 16, 0.1, 2.0);
        const auto k = pixel_kernels(g, px);
        for (Index s = 1; s + 1 < 16; ++s) {
            const RealVector& ks = k[static_cast<std::size_t>(s)];
            const Index at = g.index(g.nx() - 1, s, 0);
            CHECK(ks(at) == doctest::Approx(2.0));
            RealVector rest = ks;
            rest(at) = 0.0;
            CHECK(rest.maxCoeff() <= 2.0 * std::exp(-10.0) * (1.0 + 1e-12));
        }
    }
    SUBCASE("range below h/10 is rejected") {
        CHECK_THROWS_AS(PixelArray::evenly_spaced(g, 8, 0.05, 1.0).validate(g), ConfigError);
    }
    SUBCASE("kernel contraction against brute force on an 8x8 grid") {
        CavityGeometry sq;
        sq.shape = {8, 8};
        sq.wall_column = 3;
        sq.slits = {{2, 3}, {5, 6}};
        const auto px = PixelArray::evenly_spaced(sq, 4, 1.5, 0.8);
        const auto ops = build_jump_ops(sq, px);
        std::mt19937_64 rg(41);
        const Index ng = sq.grid_size();
        Vector psi = Vector::Zero(ng + 4);
        psi.head(ng) = random_unit(ng, rg);
        const auto mask = sq.dirichlet_mask();
        for (Index s = 0; s < 4; ++s) {
            Complex brute(0.0, 0.0);
            for (Index ix = 0; ix < 8; ++ix) {
                for (Index iy = 0; iy < 8; ++iy) {
                    const Index i = sq.index(ix, iy, 0);
                    if (mask[static_cast<std::size_t>(i)]) {
                        continue;
                    }
                    const double r = std::hypot(ix - px.positions[s][0], iy - px.positions[s][1]);
                    const double k = 0.8 * std::exp(-r / 1.5);
                    if (k >= 1e-12 * 0.8) {
                        brute += k * psi(i);
                    }
                }
            }
            const Vector out = ops[static_cast<std::size_t>(s)] * psi;
            CHECK(std::abs(out(ng + s) - brute) < 1e-13);
            CHECK(out.head(ng).norm() == 0.0);
            CHECK((out.tail(4).norm() - std::abs(out(ng + s))) == doctest::Approx(0.0));
        }
    }
}

TEST_CASE("jump operator block structure") {
    const auto g = small_geometry();
    const auto model = build_model(g, small_pixels(g));
    const Index ng = model.grid_dim();
    for (const auto& t : model.jump_ops) {
        for (Index r = 0; r < t.outerSize(); ++r) {
            for (SparseMatrix::InnerIterator it(t, r); it; ++it) {
                CHECK(it.row() >= ng);
                CHECK(it.col() < ng);
            }
        }
    }
}

TEST_CASE("decay bound") {
    const auto g = small_geometry();
    const auto px = small_pixels(g);
    const auto report = verify_decay_bound(g, px);
    REQUIRE(report.rows.size() == 8);
    for (std::size_t s = 0; s < report.rows.size(); ++s) {
        const auto& rows = report.rows[s];
        REQUIRE(!rows.empty());
        CHECK(rows.front().r == 0.0);
        CHECK(rows.front().bound == doctest::Approx(report.k_prime[s]));
        CHECK(rows.back().norm == 0.0);
        for (const auto& row : rows) {
            CHECK(row.norm <= row.bound * (1.0 + 1e-9));
        }
        // K' is never below ||kappa|| (the r = 0 row)
        CHECK(report.k_prime[s] >= report.naive_k_prime[s] * (1.0 - 1e-12));
    }
}

TEST_CASE("initial wavepacket") {
    const auto g = small_geometry();
    SUBCASE("normalized, real and mirror symmetric at rest") {
        const auto psi = small_packet(g).amplitudes();
        CHECK(psi.norm() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(psi.tail(8).norm() == 0.0);
        for (Index ix = 0; ix < g.nx(); ++ix) {
            for (Index iy = 0; iy < g.ny(); ++iy) {
                const Complex a = psi(g.index(ix, iy, 0));
                CHECK(a.imag() == 0.0);
                CHECK(a.real() >= 0.0);
                CHECK(std::abs(a - psi(g.index(ix, g.ny() - 1 - iy, 0))) < 1e-15);
            }
        }
    }
    SUBCASE("centre outside the gun chamber") {
        CHECK_THROWS_AS(initial_wavepacket(g, 8, {5.0, 7.5, 0.0}, 1.0, {0.0, 0.0, 0.0}), ConfigError);
    }
    SUBCASE("central-difference momentum") {
        CavityGeometry wide;
        wide.shape = {16, 64};
        wide.wall_column = 12;
        wide.slits = {{20, 24}, {40, 44}};
        const double k = 0.2;
        const auto psi = initial_wavepacket(wide, 0, {6.0, 31.5, 0.0}, 3.0, {0.0, k, 0.0}).amplitudes();
        Complex p(0.0, 0.0);
        for (Index ix = 1; ix + 1 < wide.nx(); ++ix) {
            for (Index iy = 1; iy + 1 < wide.ny(); ++iy) {
                const Complex d = (psi(wide.index(ix, iy + 1, 0)) - psi(wide.index(ix, iy - 1, 0))) / 2.0;
                p += std::conj(psi(wide.index(ix, iy, 0))) * (-kI * d);
            }
        }
        CHECK(std::abs(p.imag()) < 1e-12);
        CHECK(std::abs(p.real() - k) <= k * k * k / 6.0 + 0.01);
    }
}

TEST_CASE("generator assembly") {
    const auto g = small_geometry();
    const auto model = build_model(g, small_pixels(g));
    const auto l = assemble_generator(model, 1.0);
    SUBCASE("bound states are stationary") {
        for (Index s = 0; s < 8; ++s) {
            CHECK(l.apply(model.pixel_state(s).dense()).norm() == 0.0);
            CHECK(is_stationary(l, model.pixel_state(s)));
        }
    }
    SUBCASE("pixel populations never decrease") {
        const auto tr = integrate_master(l, DensityMatrix::from_pure(small_packet(g)), 0.02, 30.0, 25);
        RealVector prev = RealVector::Zero(8);
        for (const auto& s : tr.states) {
            const RealVector now = pixel_populations(model, s);
            CHECK((now - prev).minCoeff() >= -1e-12);
            prev = now;
        }
        CHECK(prev.sum() > 0.0);
        // the geometry and packet are mirror symmetric
        for (Index s = 0; s < 4; ++s) {
            CHECK(std::abs(prev(s) - prev(7 - s)) < 1e-9);
        }
    }
    SUBCASE("alpha = 0 keeps everything in the grid block") {
        const auto closed = assemble_generator(model, 0.0);
        const auto tr = integrate_master(closed, DensityMatrix::from_pure(small_packet(g)), 0.02, 20.0, 1000);
        CHECK(pixel_populations(model, tr.states.back()).norm() == 0.0);
    }
}

TEST_CASE("pixel populations") {
    const auto g = small_geometry();
    const auto model = build_model(g, small_pixels(g));
    CHECK(pixel_populations(model, DensityMatrix::from_pure(small_packet(g))).norm() == 0.0);
    const RealVector unit = pixel_populations(model, DensityMatrix::from_projector(model.pixel_state(3)));
    CHECK(unit(3) == 1.0);
    CHECK(unit.sum() == 1.0);
    CHECK(pixel_of(model, model.pixel_state(5)) == 5);
    CHECK(pixel_label(model, model.pixel_state(5)) == "pixel5");
}

TEST_CASE("escape probability") {
    const auto g = small_geometry();
    const auto model = build_model(g, small_pixels(g));
    const auto psi0 = small_packet(g);
    SUBCASE("alpha = 0 keeps p at one up to the RK4 phase error") {
        const auto curve = escape_probability(assemble_generator(model, 0.0), psi0, 0.01, 10.0, 10);
        for (std::size_t k = 1; k < curve.p.size(); ++k) {
            CHECK(curve.p[k] <= curve.p[k - 1]);
        }
        CHECK(curve.p_esc > 1.0 - 1e-7);
    }
    SUBCASE("monotone and equal to the unnormalized norm") {
        const auto l = assemble_generator(model, 1.0);
        const auto curve = escape_probability(l, psi0, 0.05, 40.0, 100);
        for (std::size_t k = 1; k < curve.p.size(); ++k) {
            CHECK(curve.p[k] <= curve.p[k - 1]);
        }
        Vector psi = psi0.amplitudes();
        for (int k = 0; k < 800; ++k) {
            psi = effective_rk4_step(l, psi, 0.05);
        }
        CHECK(std::abs(curve.p_esc - psi.squaredNorm()) < 1e-8);
        CHECK(curve.times.back() == doctest::Approx(40.0));
    }
    SUBCASE("survival equals the weight never absorbed by a pixel") {
        const auto l = assemble_generator(model, 1.0);
        const auto curve = escape_probability(l, psi0, 0.05, 20.0, 40);
        const auto master = integrate_master(l, DensityMatrix::from_pure(psi0), 0.05, 20.0, 40);
        REQUIRE(curve.times.size() == master.times.size());
        for (std::size_t k = 0; k < curve.p.size(); ++k) {
            CHECK(std::abs(curve.p[k] - (1.0 - pixel_populations(model, master.states[k]).sum())) < 1e-6);
        }
        CHECK(curve.p_esc < 0.999);
    }
}

TEST_CASE("profile statistics") {
    RealVector v(8);
    v << 1, 3, 1, 4, 4, 1, 3, 1;
    const auto m = interior_maxima(v);
    REQUIRE(m.size() == 3);
    CHECK(m[0] == 1);
    CHECK(m[1] == 3);
    CHECK(m[2] == 6);
    // central region [8/3, 18/3) = indices 2..5
    CHECK(central_visibility(v) == doctest::Approx(3.0 / 5.0));
    RealVector mono(5);
    mono << 1, 2, 3, 2, 1;
    CHECK(interior_maxima(mono).size() == 1);
}

TEST_CASE("triplet dump") {
    SparseMatrix m(2, 2);
    m.insert(0, 1) = Complex(1.5, -2.0);
    std::ostringstream os;
    write_triplets(os, m);
    const std::string s = os.str();
    CHECK(s.rfind("row,col,re,im\n", 0) == 0);
    CHECK(s.find("0,1,1.5,-2\n") != std::string::npos);
}

}
