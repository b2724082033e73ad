#include "qjump/doubleslit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include <fmt/format.h>

#include "qjump/unravel.hpp"

namespace qjump {

void CavityGeometry::validate() const {
    if (dims < 1 || dims > 3) {
        throw ConfigError(fmt::format("dims must be 1, 2 or 3 (got {})", dims));
    }
    if (static_cast<int>(shape.size()) != dims) {
        throw ConfigError(fmt::format("grid shape has {} axes, dims is {}", shape.size(), dims));
    }
    for (Index n : shape) {
        if (n < 3) {
            throw ConfigError("every grid axis needs at least 3 points");
        }
    }
    if (!(spacing > 0.0) || !std::isfinite(spacing)) {
        throw ConfigError("grid spacing must be positive");
    }
    if (!barrier) {
        return;
    }
    if (wall_column <= 0 || wall_column >= nx() - 1) {
        throw ConfigError(fmt::format("wall column {} must lie strictly between 0 and {}", wall_column, nx() - 1));
    }
    if (slits.size() > 2) {
        throw ConfigError("at most two slits");
    }
    for (std::size_t a = 0; a < slits.size(); ++a) {
        const auto& s = slits[a];
        if (s.lo >= s.hi) {
            throw ConfigError(fmt::format("slit [{}, {}) is empty", s.lo, s.hi));
        }
        if (s.lo < 1 || s.hi > ny() - 1) {
            throw ConfigError(fmt::format("slit [{}, {}) leaves the wall rows [1, {})", s.lo, s.hi, ny() - 1));
        }
        for (std::size_t b = 0; b < a; ++b) {
            if (s.lo < slits[b].hi && slits[b].lo < s.hi) {
                throw ConfigError("slits overlap");
            }
        }
    }
}

std::vector<bool> CavityGeometry::dirichlet_mask() const {
    validate();
    std::vector<bool> mask(static_cast<std::size_t>(grid_size()), false);
    for (Index ix = 0; ix < nx(); ++ix) {
        for (Index iy = 0; iy < ny(); ++iy) {
            for (Index iz = 0; iz < nz(); ++iz) {
                bool d = ix == 0;
                if (dims >= 2 && (iy == 0 || iy == ny() - 1)) {
                    d = true;
                }
                if (dims >= 3 && (iz == 0 || iz == nz() - 1)) {
                    d = true;
                }
                if (barrier && ix == wall_column) {
                    const bool open = std::any_of(slits.begin(), slits.end(),
                                                  [&](const SlitInterval& s) { return iy >= s.lo && iy < s.hi; });
                    d = d || !open;
                }
                mask[static_cast<std::size_t>(index(ix, iy, iz))] = d;
            }
        }
    }
    return mask;
}

PixelArray PixelArray::evenly_spaced(const CavityGeometry& geom, Index count, double range, double amplitude,
                                     KernelShape shape) {
    PixelArray out;
    out.range = range;
    out.amplitude = amplitude;
    out.shape = shape;
    const double x = static_cast<double>(geom.nx() - 1);
    const double ny = static_cast<double>(geom.ny());
    const double z = 0.5 * static_cast<double>(geom.nz() - 1);
    for (Index s = 0; s < count; ++s) {
        const double y = geom.dims >= 2 ? (static_cast<double>(s) + 0.5) * ny / static_cast<double>(count) - 0.5 : 0.0;
        out.positions.push_back({x, y, z});
    }
    return out;
}

void PixelArray::validate(const CavityGeometry& geom) const {
    if (positions.empty()) {
        throw ConfigError("at least one pixel is required");
    }
    if (!(range > 0.0) || !(amplitude > 0.0)) {
        throw ConfigError("pixel kernel range and amplitude must be positive");
    }
    if (range < 0.1) {
        throw ConfigError(fmt::format(
            "pixel kernel range {} is below h/10: the kernel is truncated to its own grid cell", range));
    }
    const double screen = static_cast<double>(geom.nx() - 1);
    for (std::size_t a = 0; a < positions.size(); ++a) {
        if (positions[a][0] != screen) {
            throw ConfigError(fmt::format("pixel {} is not on the screen face x = {}", a, screen));
        }
        for (std::size_t b = 0; b < a; ++b) {
            if (positions[a] == positions[b]) {
                throw ConfigError(fmt::format("pixels {} and {} coincide", b, a));
            }
        }
    }
}

SparseMatrix stencil_laplacian(const std::vector<Index>& shape, double spacing, const std::vector<bool>& dirichlet,
                               bool neumann_at_xmax) {
    const int dims = static_cast<int>(shape.size());
    Index n = 1;
    for (Index s : shape) {
        n *= s;
    }
    if (static_cast<Index>(dirichlet.size()) != n) {
        throw DimensionError("Dirichlet mask does not match the grid");
    }
    std::array<Index, 3> ext{1, 1, 1};
    for (int a = 0; a < dims; ++a) {
        ext[a] = shape[a];
    }
    std::array<Index, 3> stride{ext[1] * ext[2], ext[2], 1};
    const double c = 0.5 / (spacing * spacing);
    std::vector<Triplet> entries;
    entries.reserve(static_cast<std::size_t>(n) * (2 * dims + 1));
    for (Index i = 0; i < n; ++i) {
        if (dirichlet[i]) {
            continue;
        }
        const std::array<Index, 3> at{i / stride[0], (i / stride[1]) % ext[1], i % ext[2]};
        double diag = 2.0 * dims * c;
        for (int a = 0; a < dims; ++a) {
            for (int dir : {-1, 1}) {
                const Index p = at[a] + dir;
                if (p < 0 || p >= ext[a]) {
                    if (a == 0 && dir == 1 && neumann_at_xmax) {
                        diag -= c;  // mirror ghost
                    }
                    continue;       // outside the box: zero ghost
                }
                const Index j = i + dir * stride[a];
                if (!dirichlet[j]) {
                    entries.emplace_back(i, j, Complex(-c, 0.0));
                }
            }
        }
        entries.emplace_back(i, i, Complex(diag, 0.0));
    }
    SparseMatrix m(n, n);
    m.setFromTriplets(entries.begin(), entries.end());
    m.makeCompressed();
    return m;
}

HermitianOperator build_hamiltonian(const CavityGeometry& geom) {
    geom.validate();
    return HermitianOperator::from_sparse(
        stencil_laplacian(geom.shape, geom.spacing, geom.dirichlet_mask(), true));
}

namespace {

double kernel_value(const PixelArray& pixels, double dist) {
    if (pixels.shape == KernelShape::kExponential) {
        return pixels.amplitude * std::exp(-dist / pixels.range);
    }
    return pixels.amplitude * std::exp(-dist * dist / (2.0 * pixels.range * pixels.range));
}

// Distance in units of h from every grid point to a pixel.
RealVector distances(const CavityGeometry& geom, const std::array<double, 3>& pos) {
    RealVector out(geom.grid_size());
    for (Index ix = 0; ix < geom.nx(); ++ix) {
        for (Index iy = 0; iy < geom.ny(); ++iy) {
            for (Index iz = 0; iz < geom.nz(); ++iz) {
                const double dx = static_cast<double>(ix) - pos[0];
                const double dy = geom.dims >= 2 ? static_cast<double>(iy) - pos[1] : 0.0;
                const double dz = geom.dims >= 3 ? static_cast<double>(iz) - pos[2] : 0.0;
                out(geom.index(ix, iy, iz)) = std::sqrt(dx * dx + dy * dy + dz * dz);
            }
        }
    }
    return out;
}

}  // namespace

std::vector<RealVector> pixel_kernels(const CavityGeometry& geom, const PixelArray& pixels) {
    geom.validate();
    pixels.validate(geom);
    const auto mask = geom.dirichlet_mask();
    std::vector<RealVector> out;
    for (Index s = 0; s < pixels.count(); ++s) {
        const RealVector dist = distances(geom, pixels.positions[s]);
        RealVector k = RealVector::Zero(geom.grid_size());
        for (Index i = 0; i < k.size(); ++i) {
            const double v = kernel_value(pixels, dist(i));
            if (!mask[i] && v >= 1e-12 * pixels.amplitude) {
                k(i) = v;
            }
        }
        if (k.squaredNorm() == 0.0) {
            throw ConfigError(fmt::format("kernel of pixel {} vanishes on the grid (range too small)", s));
        }
        out.push_back(std::move(k));
    }
    return out;
}

std::vector<SparseMatrix> build_jump_ops(const CavityGeometry& geom, const PixelArray& pixels) {
    const auto kernels = pixel_kernels(geom, pixels);
    const Index ng = geom.grid_size();
    const Index total = ng + pixels.count();
    std::vector<SparseMatrix> out;
    for (Index s = 0; s < pixels.count(); ++s) {
        std::vector<Triplet> entries;
        for (Index i = 0; i < ng; ++i) {
            if (kernels[s](i) != 0.0) {
                entries.emplace_back(ng + s, i, Complex(kernels[s](i), 0.0));
            }
        }
        SparseMatrix t(total, total);
        t.setFromTriplets(entries.begin(), entries.end());
        t.makeCompressed();
        out.push_back(std::move(t));
    }
    return out;
}

DecayBoundReport verify_decay_bound(const CavityGeometry& geom, const PixelArray& pixels) {
    const auto kernels = pixel_kernels(geom, pixels);
    const double R = pixels.range;
    DecayBoundReport report;
    for (Index s = 0; s < pixels.count(); ++s) {
        const RealVector dist = distances(geom, pixels.positions[s]);
        // tail(r)^2 = sum over |x - x_s| >= r of kappa^2, a step function of r
        std::map<double, double> shell;
        for (Index i = 0; i < dist.size(); ++i) {
            shell[dist(i)] += kernels[s](i) * kernels[s](i);
        }
        std::vector<std::pair<double, double>> tail;  // (d_j, tail(d_j)^2), d_j descending
        double acc = 0.0;
        for (auto it = shell.rbegin(); it != shell.rend(); ++it) {
            acc += it->second;
            tail.emplace_back(it->first, acc);
        }
        std::reverse(tail.begin(), tail.end());
        const double total = std::sqrt(acc);
        // the bound is tight at the shell radii, where tail * e^{r/R} peaks
        double kp = 0.0;
        for (const auto& [d, t2] : tail) {
            kp = std::max(kp, std::sqrt(t2) * std::exp(d / R));
        }
        auto tail_norm = [&](double r) {
            const auto it = std::lower_bound(tail.begin(), tail.end(), r,
                                             [](const auto& e, double v) { return e.first < v; });
            return it == tail.end() ? 0.0 : std::sqrt(it->second);
        };
        std::vector<double> ladder;
        for (const auto& e : tail) {
            ladder.push_back(e.first);
        }
        const double diameter = tail.back().first;
        for (double r = 0.0; r <= diameter + 2.0 * R; r += 0.5 * R) {
            ladder.push_back(r);
        }
        std::sort(ladder.begin(), ladder.end());
        std::vector<DecayBoundRow> rows;
        for (double r : ladder) {
            const double norm = tail_norm(r);
            const double bound = kp * std::exp(-r / R);
            if (norm > bound * (1.0 + 1e-9)) {
                throw NumericalError(
                    fmt::format("decay bound violated for pixel {} at r={}: {} > {}", s, r, norm, bound));
            }
            if (norm > total * std::exp(-r / R) * (1.0 + 1e-9)) {
                report.naive_holds = false;
            }
            rows.push_back(DecayBoundRow{r, norm, bound});
        }
        report.k_prime.push_back(kp);
        report.naive_k_prime.push_back(total);
        report.rows.push_back(std::move(rows));
    }
    return report;
}

PureState initial_wavepacket(const CavityGeometry& geom, Index pixel_count, const std::array<double, 3>& center,
                             double width, const std::array<double, 3>& momentum) {
    geom.validate();
    if (!(width > 0.0)) {
        throw ConfigError("wavepacket width must be positive");
    }
    const double x_max = geom.barrier ? static_cast<double>(geom.wall_column) : static_cast<double>(geom.nx() - 1);
    if (!(center[0] > 0.0 && center[0] < x_max)) {
        throw ConfigError(fmt::format("wavepacket centre x={} is outside the gun chamber (0, {})", center[0], x_max));
    }
    for (int a = 1; a < geom.dims; ++a) {
        if (!(center[a] > 0.0 && center[a] < static_cast<double>(geom.shape[a] - 1))) {
            throw ConfigError(fmt::format("wavepacket centre is outside the cavity along axis {}", a));
        }
    }
    const auto mask = geom.dirichlet_mask();
    Vector psi = Vector::Zero(geom.grid_size() + pixel_count);
    for (Index ix = 0; ix < geom.nx(); ++ix) {
        // only the gun chamber carries amplitude
        if (geom.barrier && ix >= geom.wall_column) {
            break;
        }
        for (Index iy = 0; iy < geom.ny(); ++iy) {
            for (Index iz = 0; iz < geom.nz(); ++iz) {
                const Index i = geom.index(ix, iy, iz);
                if (mask[i]) {
                    continue;
                }
                const std::array<double, 3> x{static_cast<double>(ix), static_cast<double>(iy),
                                              static_cast<double>(iz)};
                double r2 = 0.0;
                double phase = 0.0;
                for (int a = 0; a < geom.dims; ++a) {
                    r2 += (x[a] - center[a]) * (x[a] - center[a]);
                    phase += momentum[a] * x[a];
                }
                psi(i) = std::exp(-r2 / (4.0 * width * width)) * std::polar(1.0, phase);
            }
        }
    }
    if (psi.norm() == 0.0) {
        throw ConfigError("wavepacket vanishes on the grid");
    }
    return PureState::normalized(psi);
}

DoubleSlitModel build_model(const CavityGeometry& geom, const PixelArray& pixels) {
    return DoubleSlitModel{geom, pixels, build_hamiltonian(geom), build_jump_ops(geom, pixels)};
}

LindbladGenerator assemble_generator(const DoubleSlitModel& model, double alpha) {
    const Index ng = model.grid_dim();
    const SparseMatrix& h = model.h_el.to_sparse();
    if (h.rows() != ng) {
        throw DimensionError("electron Hamiltonian does not match the grid");
    }
    SparseMatrix h0(model.total_dim(), model.total_dim());
    std::vector<Triplet> entries;
    entries.reserve(static_cast<std::size_t>(h.nonZeros()));
    for (Index r = 0; r < h.outerSize(); ++r) {
        for (SparseMatrix::InnerIterator it(h, r); it; ++it) {
            entries.emplace_back(it.row(), it.col(), it.value());
        }
    }
    h0.setFromTriplets(entries.begin(), entries.end());
    return LindbladGenerator(HermitianOperator::from_sparse(std::move(h0)), alpha, model.jump_ops);
}

LindbladGenerator assemble_generator(const CavityGeometry& geom, const PixelArray& pixels, double alpha) {
    return assemble_generator(build_model(geom, pixels), alpha);
}

EscapeCurve escape_probability(const LindbladGenerator& gen, const PureState& psi0, double ode_dt, double t_max,
                               long record_every) {
    require_same_dim(gen.dim(), psi0.dim(), "escape_probability");
    if (!(t_max > 0.0)) {
        throw StepSizeError("Tmax must be positive");
    }
    if (record_every < 1) {
        throw StepSizeError("record interval must be >= 1 step");
    }
    const long n = step_count(ode_dt, t_max);
    EscapeCurve out;
    out.times.push_back(0.0);
    out.p.push_back(1.0);
    Vector psi = psi0.amplitudes();
    double log_p = 0.0;
    for (long k = 1; k <= n; ++k) {
        psi = effective_rk4_step(gen, psi, ode_dt);
        const double factor = psi.squaredNorm();
        if (!(factor > 0.0) || !std::isfinite(factor)) {
            throw IntegrationError(k, "no-jump state collapsed");
        }
        if (factor > 1.0 + 1e-10) {
            throw IntegrationError(k, fmt::format("survival increased by {:.3e}", factor - 1.0));
        }
        log_p += std::log(factor);
        psi /= std::sqrt(factor);
        if (k % record_every == 0 || k == n) {
            out.times.push_back(static_cast<double>(k) * ode_dt);
            out.p.push_back(std::exp(log_p));
        }
    }
    out.p_esc = out.p.back();
    return out;
}

RealVector pixel_populations(const DoubleSlitModel& model, const DensityMatrix& rho) {
    require_same_dim(model.total_dim(), rho.dim(), "pixel_populations");
    const Index ng = model.grid_dim();
    RealVector out(model.pixels.count());
    for (Index s = 0; s < out.size(); ++s) {
        out(s) = rho.matrix()(ng + s, ng + s).real();
        if (out(s) < -1e-10) {
            throw NumericalError(fmt::format("pixel {} population {:.3e} is negative", s, out(s)));
        }
    }
    if (out.sum() > 1.0 + 1e-9) {
        throw NumericalError(fmt::format("pixel populations sum to {}", out.sum()));
    }
    return out;
}

RealVector pixel_weights(const DoubleSlitModel& model, const Projector& p) {
    require_same_dim(model.total_dim(), p.dim(), "pixel_weights");
    const Index ng = model.grid_dim();
    RealVector out(model.pixels.count());
    for (Index s = 0; s < out.size(); ++s) {
        out(s) = p.basis().row(ng + s).squaredNorm() / static_cast<double>(p.rank());
    }
    return out;
}

int pixel_of(const DoubleSlitModel& model, const Projector& p) {
    Index s = 0;
    const double w = pixel_weights(model, p).maxCoeff(&s);
    return w >= 1.0 - 1e-9 ? static_cast<int>(s) : -1;
}

std::string pixel_label(const DoubleSlitModel& model, const Projector& p) {
    const int s = pixel_of(model, p);
    return s >= 0 ? fmt::format("pixel{}", s) : default_target_label(p);
}

void write_triplets(std::ostream& os, const SparseMatrix& m) {
    os << "row,col,re,im\n";
    for (Index r = 0; r < m.outerSize(); ++r) {
        for (SparseMatrix::InnerIterator it(m, r); it; ++it) {
            os << fmt::format("{},{},{:.17g},{:.17g}\n", it.row(), it.col(), it.value().real(), it.value().imag());
        }
    }
}

std::vector<Index> interior_maxima(const RealVector& profile, double plateau_tol) {
    struct Run {
        Index first;
        double value;
    };
    std::vector<Run> runs;
    const Index n = profile.size();
    Index i = 0;
    while (i < n) {
        Index j = i;
        const double ref = profile(i);
        while (j + 1 < n && std::abs(profile(j + 1) - ref) <= plateau_tol * std::max(std::abs(ref), 1e-300)) {
            ++j;
        }
        runs.push_back(Run{i, ref});
        i = j + 1;
    }
    std::vector<Index> out;
    for (std::size_t r = 1; r + 1 < runs.size(); ++r) {
        if (runs[r].value > runs[r - 1].value && runs[r].value > runs[r + 1].value) {
            out.push_back(runs[r].first);
        }
    }
    return out;
}

double central_visibility(const RealVector& profile) {
    const Index n = profile.size();
    const Index lo = n / 3;
    const Index hi = (2 * n + 2) / 3;
    if (hi <= lo) {
        throw DimensionError("profile too short for a central region");
    }
    const RealVector c = profile.segment(lo, hi - lo);
    const double mx = c.maxCoeff();
    const double mn = c.minCoeff();
    return mx + mn > 0.0 ? (mx - mn) / (mx + mn) : 0.0;
}

}  // namespace qjump
