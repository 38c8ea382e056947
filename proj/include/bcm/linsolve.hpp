#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcm {

class LinearSolverError : public std::runtime_error {
public:
    LinearSolverError(const std::string& what, std::size_t iterations, double residual)
        : std::runtime_error(what), iterations_(iterations), residual_(residual) {}
    std::size_t iterations() const { return iterations_; }
    double residual() const { return residual_; }

private:
    std::size_t iterations_;
    double residual_;
};

/// NaN or a non-positive curvature (p, Ap) during the iteration.
class NumericalBreakdown : public LinearSolverError {
public:
    using LinearSolverError::LinearSolverError;
};

/// Row-compressed symmetric positive (semi-)definite matrix.
class SparseSpd {
public:
    struct Triplet {
        std::size_t row;
        std::size_t col;
        double value;
    };

    SparseSpd() = default;
    /// Duplicate entries are summed, columns sorted per row.
    static SparseSpd from_triplets(std::size_t dimension, std::vector<Triplet> entries);

    std::size_t dimension() const { return row_offsets_.empty() ? 0 : row_offsets_.size() - 1; }
    std::size_t nonzeros() const { return values_.size(); }
    const std::vector<std::size_t>& row_offsets() const { return row_offsets_; }
    const std::vector<std::size_t>& columns() const { return columns_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    void multiply(std::span<const double> x, std::span<double> y) const;
    std::vector<double> multiply(std::span<const double> x) const;
    std::vector<double> diagonal() const;
    /// Value at (row, col), zero when structurally absent.
    double at(std::size_t row, std::size_t col) const;

    /// Returns scale * this + diag(shift), same sparsity pattern.
    SparseSpd scaled_plus_diagonal(double scale, std::span<const double> shift) const;

    /// Rows/columns with keep[i] == true, renumbered in order.
    SparseSpd restricted(const std::vector<bool>& keep) const;

    /// Structural symmetry, sorted columns, present positive diagonal.
    /// Throws std::invalid_argument describing the first violation.
    void validate() const;

private:
    std::vector<std::size_t> row_offsets_;
    std::vector<std::size_t> columns_;
    std::vector<double> values_;
};

enum class Preconditioner { jacobi, deflated_jacobi };

inline constexpr std::size_t kNoGroup = std::numeric_limits<std::size_t>::max();

/// Coarse space of piecewise-constant group indicators for deflated CG.
class Deflation {
public:
    Deflation() = default;
    std::size_t num_groups() const { return num_groups_; }
    const std::vector<std::size_t>& groups() const { return groups_; }
    /// Coarse matrix W^T A W, row-major.
    const std::vector<double>& coarse_matrix() const { return coarse_; }

    /// x += W E^{-1} W^T r
    void add_coarse_correction(std::span<const double> r, std::span<double> x) const;
    /// p -= W E^{-1} (AW)^T z
    void project(std::span<const double> z, std::span<double> p) const;

private:
    friend Deflation build_deflation(const SparseSpd&, std::vector<std::size_t>, bool);
    std::vector<double> coarse_solve(std::vector<double> rhs) const;

    std::vector<std::size_t> groups_;
    std::size_t num_groups_ = 0;
    std::vector<double> aw_;      // n x g, row-major
    std::vector<double> coarse_;  // g x g
    std::vector<double> cholesky_; // lower factor of the (regularised) coarse matrix
};

/// `groups[i]` is the group of unknown i. Group ids must be dense 0..g-1 with
/// every group non-empty. With `constant_nullspace` the coarse matrix is
/// singular along the all-ones group vector; the coarse solve is regularised
/// along that direction.
Deflation build_deflation(const SparseSpd& matrix, std::vector<std::size_t> groups,
                          bool constant_nullspace = false);

struct SolverConfig {
    double rel_tolerance = 1e-10;
    std::size_t max_iterations = 0; ///< 0 means 10 * dimension
    Preconditioner preconditioner = Preconditioner::jacobi;
    /// Used to build a coarse space on the fly when no Deflation is passed.
    std::vector<std::size_t> deflation_groups;
    /// Pure-Neumann systems: project the rhs off the constants, return a
    /// mean-zero solution.
    bool constant_nullspace = false;
    /// Called after every iteration with the current iterate.
    std::function<void(std::size_t, std::span<const double>)> observer;

    void validate() const;
};

struct SolveResult {
    std::vector<double> x;
    std::size_t iterations = 0;
    double final_residual = 0.0; ///< ||b - Ax|| / ||b||, true residual
    std::vector<double> residual_history;
};

/// Preconditioned conjugate gradients. Converged when ||b - Ax|| <= tol * ||b||
/// (||b|| floored at 1e-30); a zero rhs returns the zero vector.
SolveResult pcg_solve(const SparseSpd& matrix, std::span<const double> rhs,
                      std::span<const double> initial_guess, const SolverConfig& config,
                      const Deflation* deflation = nullptr);

/// "%%MatrixMarket matrix coordinate real symmetric", lower triangle, 1-based.
void write_matrix_market(std::ostream& os, const SparseSpd& matrix);
void write_matrix_market(const std::filesystem::path& path, const SparseSpd& matrix);

} // namespace bcm
