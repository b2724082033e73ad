#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "qjump/lindblad.hpp"

namespace qjump {

/// Openings in the barrier: grid rows [lo, hi) along y (full depth in 3D).
struct SlitInterval {
    Index lo = 0;
    Index hi = 0;
};

/// Box cavity on a regular grid. x is the propagation axis: the gun face is
/// x = 0, the screen face is x = nx - 1, and the barrier is the plane
/// x = wall_column. Grid points are ordered x-major (index = (ix*ny + iy)*nz + iz).
struct CavityGeometry {
    int dims = 2;
    std::vector<Index> shape{8, 16};
    double spacing = 1.0;
    bool barrier = true;
    Index wall_column = 3;
    std::vector<SlitInterval> slits{{2, 5}, {11, 14}};

    /// Throws ConfigError on a malformed geometry.
    void validate() const;

    Index nx() const { return shape[0]; }
    Index ny() const { return dims >= 2 ? shape[1] : 1; }
    Index nz() const { return dims >= 3 ? shape[2] : 1; }
    Index grid_size() const { return nx() * ny() * nz(); }
    Index index(Index ix, Index iy = 0, Index iz = 0) const { return (ix * ny() + iy) * nz() + iz; }

    /// Zero-Dirichlet cells: every face but the screen, plus closed barrier cells.
    std::vector<bool> dirichlet_mask() const;
};

enum class KernelShape { kExponential, kGaussian };

/// Detector pixels on the screen face with kernels
/// K exp(-|x - x_s| / R) (or K exp(-|x - x_s|^2 / (2 R^2))).
struct PixelArray {
    std::vector<std::array<double, 3>> positions;
    double range = 0.7;
    double amplitude = 1.0;
    KernelShape shape = KernelShape::kExponential;

    /// `count` pixels evenly spread along y on the screen (centred in z).
    static PixelArray evenly_spaced(const CavityGeometry& geom, Index count, double range, double amplitude,
                                    KernelShape shape = KernelShape::kExponential);

    Index count() const { return static_cast<Index>(positions.size()); }
    void validate(const CavityGeometry& geom) const;
};

/// -(1/2) discrete Laplacian on a box of `shape` (1 to 3 axes) with spacing h.
/// Rows and columns of masked cells are zero. With `neumann_at_xmax` the last
/// x layer uses a mirror ghost (the missing neighbour equals the cell itself).
SparseMatrix stencil_laplacian(const std::vector<Index>& shape, double spacing, const std::vector<bool>& dirichlet,
                               bool neumann_at_xmax);

/// Electron Hamiltonian on the grid block.
HermitianOperator build_hamiltonian(const CavityGeometry& geom);

/// kappa_s sampled on the grid, zero on Dirichlet cells and below 1e-12 K.
std::vector<RealVector> pixel_kernels(const CavityGeometry& geom, const PixelArray& pixels);

/// T_s = |s><kappa_s| on the full space (grid block followed by one bound
/// state per pixel).
std::vector<SparseMatrix> build_jump_ops(const CavityGeometry& geom, const PixelArray& pixels);

struct DecayBoundRow {
    double r;
    double norm;   // ||T_s P_{s,r}||
    double bound;  // K' exp(-r/R)
};

struct DecayBoundReport {
    std::vector<double> k_prime;  // per pixel: smallest K' valid at every r
    std::vector<double> naive_k_prime;  // per pixel: ||kappa_s||
    std::vector<std::vector<DecayBoundRow>> rows;
    bool naive_holds = true;  // whether ||kappa_s|| exp(-r/R) also bounds every row
};

/// Checks ||T_s P_{s,r}|| <= K' exp(-r/R) on a ladder of r (every lattice
/// distance plus steps of R/2 past the cavity diameter). P_{s,r} removes the
/// grid points with |x - x_s| < r. Throws NumericalError on a violation.
DecayBoundReport verify_decay_bound(const CavityGeometry& geom, const PixelArray& pixels);

/// Gaussian packet exp(-|x - c|^2 / (4 w^2)) exp(i k.x) on the grid, zero on
/// Dirichlet cells and on the `pixel_count` bound states.
PureState initial_wavepacket(const CavityGeometry& geom, Index pixel_count, const std::array<double, 3>& center,
                             double width, const std::array<double, 3>& momentum);

/// Geometry, pixels and assembled operators.
struct DoubleSlitModel {
    CavityGeometry geometry;
    PixelArray pixels;
    HermitianOperator h_el;
    std::vector<SparseMatrix> jump_ops;

    Index grid_dim() const { return geometry.grid_size(); }
    Index total_dim() const { return grid_dim() + pixels.count(); }
    Projector pixel_state(Index s) const { return Projector::basis_vector(total_dim(), grid_dim() + s); }
};

DoubleSlitModel build_model(const CavityGeometry& geom, const PixelArray& pixels);

/// H0 = H_el (+) 0 on the bound block, jump operators T_s, coupling alpha.
LindbladGenerator assemble_generator(const DoubleSlitModel& model, double alpha);
LindbladGenerator assemble_generator(const CavityGeometry& geom, const PixelArray& pixels, double alpha);

struct EscapeCurve {
    std::vector<double> times;
    std::vector<double> p;
    double p_esc = 1.0;  // p(Tmax)
};

/// Survival weight of the no-jump evolution. The normalized state is advanced
/// by RK4 steps of the effective generator; each step's norm factor
/// (1 + int p'/p) is accumulated in log p. Throws IntegrationError if p rises
/// by more than 1e-10.
EscapeCurve escape_probability(const LindbladGenerator& gen, const PureState& psi0, double ode_dt, double t_max,
                               long record_every = 1);

/// (Tr(Q_s rho))_s for every pixel.
RealVector pixel_populations(const DoubleSlitModel& model, const DensityMatrix& rho);

/// Tr(Q_s P) / rank(P) for every pixel.
RealVector pixel_weights(const DoubleSlitModel& model, const Projector& p);

/// Pixel index when P sits in one pixel state (weight >= 1 - 1e-9), else -1.
int pixel_of(const DoubleSlitModel& model, const Projector& p);

/// "pixel<s>", or the generic label for anything else.
std::string pixel_label(const DoubleSlitModel& model, const Projector& p);

/// `row,col,re,im` lines after a header line.
void write_triplets(std::ostream& os, const SparseMatrix& m);

/// Interior local maxima of a profile; runs of values equal within relative
/// `plateau_tol` count as one point located at the run's first index.
std::vector<Index> interior_maxima(const RealVector& profile, double plateau_tol = 1e-6);

/// (max - min) / (max + min) over indices [N/3, (2N + 2)/3).
double central_visibility(const RealVector& profile);

}  // namespace qjump
