#include "bcm/linsolve.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace bcm {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void remove_mean(std::span<double> v) {
    if (v.empty()) return;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x -= mean;
}

} // namespace

SparseSpd SparseSpd::from_triplets(std::size_t n, std::vector<Triplet> entries) {
    std::sort(entries.begin(), entries.end(), [](const Triplet& a, const Triplet& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    SparseSpd m;
    m.row_offsets_.assign(n + 1, 0);
    for (std::size_t k = 0; k < entries.size();) {
        const auto& t = entries[k];
        if (t.row >= n || t.col >= n) throw std::invalid_argument("sparse entry out of range");
        double v = 0.0;
        std::size_t j = k;
        while (j < entries.size() && entries[j].row == t.row && entries[j].col == t.col) {
            v += entries[j].value;
            ++j;
        }
        m.columns_.push_back(t.col);
        m.values_.push_back(v);
        ++m.row_offsets_[t.row + 1];
        k = j;
    }
    std::partial_sum(m.row_offsets_.begin(), m.row_offsets_.end(), m.row_offsets_.begin());
    return m;
}

void SparseSpd::multiply(std::span<const double> x, std::span<double> y) const {
    const std::size_t n = dimension();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) s += values_[k] * x[columns_[k]];
        y[i] = s;
    }
}

std::vector<double> SparseSpd::multiply(std::span<const double> x) const {
    std::vector<double> y(dimension());
    multiply(x, y);
    return y;
}

std::vector<double> SparseSpd::diagonal() const {
    std::vector<double> d(dimension(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = at(i, i);
    return d;
}

double SparseSpd::at(std::size_t row, std::size_t col) const {
    const auto first = columns_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[row]);
    const auto last = columns_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[row + 1]);
    const auto it = std::lower_bound(first, last, col);
    if (it == last || *it != col) return 0.0;
    return values_[static_cast<std::size_t>(it - columns_.begin())];
}

SparseSpd SparseSpd::scaled_plus_diagonal(double scale, std::span<const double> shift) const {
    SparseSpd out = *this;
    for (double& v : out.values_) v *= scale;
    for (std::size_t i = 0; i < dimension(); ++i) {
        bool found = false;
        for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
            if (columns_[k] == i) {
                out.values_[k] += shift[i];
                found = true;
                break;
            }
        }
        if (!found) throw std::invalid_argument("scaled_plus_diagonal: missing diagonal entry");
    }
    return out;
}

SparseSpd SparseSpd::restricted(const std::vector<bool>& keep) const {
    const std::size_t n = dimension();
    std::vector<std::size_t> map(n, kNoGroup);
    std::size_t m = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i]) map[i] = m++;
    }
    SparseSpd out;
    out.row_offsets_.assign(m + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!keep[i]) continue;
        for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
            if (map[columns_[k]] == kNoGroup) continue;
            out.columns_.push_back(map[columns_[k]]);
            out.values_.push_back(values_[k]);
            ++out.row_offsets_[map[i] + 1];
        }
    }
    std::partial_sum(out.row_offsets_.begin(), out.row_offsets_.end(), out.row_offsets_.begin());
    return out;
}

void SparseSpd::validate() const {
    const std::size_t n = dimension();
    for (std::size_t i = 0; i < n; ++i) {
        bool diag = false;
        for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
            const std::size_t j = columns_[k];
            if (k > row_offsets_[i] && columns_[k - 1] >= j) {
                throw std::invalid_argument("columns not sorted in row " + std::to_string(i));
            }
            if (j == i) {
                diag = true;
                if (!(values_[k] > 0.0)) {
                    throw std::invalid_argument("non-positive diagonal in row " + std::to_string(i));
                }
            }
            const auto first = columns_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[j]);
            const auto last = columns_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[j + 1]);
            if (!std::binary_search(first, last, i)) {
                throw std::invalid_argument("pattern not symmetric at (" + std::to_string(i) + ", " +
                                            std::to_string(j) + ")");
            }
        }
        if (!diag) throw std::invalid_argument("missing diagonal in row " + std::to_string(i));
    }
}

Deflation build_deflation(const SparseSpd& matrix, std::vector<std::size_t> groups,
                          bool constant_nullspace) {
    const std::size_t n = matrix.dimension();
    if (groups.size() != n) {
        throw std::invalid_argument("deflation: group map covers " + std::to_string(groups.size()) +
                                    " of " + std::to_string(n) + " unknowns");
    }
    std::size_t g = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (groups[i] == kNoGroup) {
            throw std::invalid_argument("deflation: unknown " + std::to_string(i) + " has no group");
        }
        g = std::max(g, groups[i] + 1);
    }
    std::vector<std::size_t> counts(g, 0);
    for (auto id : groups) ++counts[id];
    for (std::size_t k = 0; k < g; ++k) {
        if (counts[k] == 0) throw std::invalid_argument("deflation: group " + std::to_string(k) + " is empty");
    }

    Deflation d;
    d.groups_ = std::move(groups);
    d.num_groups_ = g;
    d.aw_.assign(n * g, 0.0);
    const auto& rows = matrix.row_offsets();
    const auto& cols = matrix.columns();
    const auto& vals = matrix.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = rows[i]; k < rows[i + 1]; ++k) d.aw_[i * g + d.groups_[cols[k]]] += vals[k];
    }
    d.coarse_.assign(g * g, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < g; ++h) d.coarse_[d.groups_[i] * g + h] += d.aw_[i * g + h];
    }

    std::vector<double> a = d.coarse_;
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const double s = 0.5 * (a[i * g + j] + a[j * g + i]);
            a[i * g + j] = a[j * g + i] = s;
        }
    }
    if (constant_nullspace) {
        double trace = 0.0;
        for (std::size_t i = 0; i < g; ++i) trace += a[i * g + i];
        const double mu = trace / static_cast<double>(g * g);
        for (double& v : a) v += mu;
    }
    // dense Cholesky, lower triangle
    for (std::size_t j = 0; j < g; ++j) {
        double s = a[j * g + j];
        for (std::size_t k = 0; k < j; ++k) s -= a[j * g + k] * a[j * g + k];
        if (!(s > 0.0)) throw std::invalid_argument("deflation: coarse matrix is not positive definite");
        a[j * g + j] = std::sqrt(s);
        for (std::size_t i = j + 1; i < g; ++i) {
            double t = a[i * g + j];
            for (std::size_t k = 0; k < j; ++k) t -= a[i * g + k] * a[j * g + k];
            a[i * g + j] = t / a[j * g + j];
        }
    }
    d.cholesky_ = std::move(a);
    return d;
}

std::vector<double> Deflation::coarse_solve(std::vector<double> y) const {
    const std::size_t g = num_groups_;
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t k = 0; k < i; ++k) y[i] -= cholesky_[i * g + k] * y[k];
        y[i] /= cholesky_[i * g + i];
    }
    for (std::size_t i = g; i-- > 0;) {
        for (std::size_t k = i + 1; k < g; ++k) y[i] -= cholesky_[k * g + i] * y[k];
        y[i] /= cholesky_[i * g + i];
    }
    return y;
}

void Deflation::add_coarse_correction(std::span<const double> r, std::span<double> x) const {
    std::vector<double> c(num_groups_, 0.0);
    for (std::size_t i = 0; i < r.size(); ++i) c[groups_[i]] += r[i];
    const auto y = coarse_solve(std::move(c));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[groups_[i]];
}

void Deflation::project(std::span<const double> z, std::span<double> p) const {
    const std::size_t g = num_groups_;
    std::vector<double> c(g, 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t h = 0; h < g; ++h) c[h] += aw_[i * g + h] * z[i];
    }
    const auto y = coarse_solve(std::move(c));
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= y[groups_[i]];
}

void SolverConfig::validate() const {
    if (!(rel_tolerance > 0.0 && rel_tolerance < 1.0)) {
        throw std::invalid_argument("solver: rel_tolerance must lie in (0, 1)");
    }
}

SolveResult pcg_solve(const SparseSpd& a, std::span<const double> rhs,
                      std::span<const double> initial_guess, const SolverConfig& config,
                      const Deflation* deflation) {
    config.validate();
    const std::size_t n = a.dimension();
    if (rhs.size() != n || (!initial_guess.empty() && initial_guess.size() != n)) {
        throw std::invalid_argument("pcg_solve: vector size does not match matrix dimension");
    }
    const std::size_t max_it = config.max_iterations == 0 ? 10 * std::max<std::size_t>(n, 1)
                                                           : config.max_iterations;

    Deflation local;
    if (config.preconditioner == Preconditioner::deflated_jacobi && deflation == nullptr) {
        if (config.deflation_groups.empty()) {
            throw std::invalid_argument("pcg_solve: deflated preconditioner needs groups");
        }
        local = build_deflation(a, config.deflation_groups, config.constant_nullspace);
        deflation = &local;
    }
    if (config.preconditioner == Preconditioner::jacobi) deflation = nullptr;

    std::vector<double> b(rhs.begin(), rhs.end());
    if (config.constant_nullspace) remove_mean(b);
    for (double v : b) {
        if (!std::isfinite(v)) throw NumericalBreakdown("pcg_solve: non-finite right-hand side", 0, NAN);
    }

    SolveResult res;
    res.x.assign(n, 0.0);
    const double bnorm = norm2(b);
    if (bnorm < 1e-30) {
        // zero rhs: the null-space projection of any guess is zero
        return res;
    }
    if (!initial_guess.empty()) std::copy(initial_guess.begin(), initial_guess.end(), res.x.begin());

    std::vector<double> inv_diag = a.diagonal();
    for (double& d : inv_diag) {
        if (!(d > 0.0)) throw NumericalBreakdown("pcg_solve: non-positive diagonal", 0, NAN);
        d = 1.0 / d;
    }

    std::vector<double> r(n), z(n), p(n), w(n);
    auto true_residual = [&] {
        a.multiply(res.x, w);
        for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - w[i];
    };
    true_residual();
    if (deflation) {
        deflation->add_coarse_correction(r, res.x);
        true_residual();
    }
    auto precondition = [&] {
        for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
    };
    auto restart_direction = [&] {
        precondition();
        p = z;
        if (deflation) deflation->project(z, p);
    };

    const double target = config.rel_tolerance * bnorm;
    double rnorm = norm2(r);
    res.residual_history.push_back(rnorm / bnorm);
    if (rnorm <= target) {
        res.final_residual = rnorm / bnorm;
        if (config.constant_nullspace) remove_mean(res.x);
        return res;
    }
    restart_direction();
    double rz = dot(r, z);

    std::size_t it = 0;
    while (it < max_it) {
        a.multiply(p, w);
        const double pw = dot(p, w);
        if (!std::isfinite(pw) || !(pw > 0.0)) {
            std::ostringstream os;
            os << "pcg_solve: breakdown, (p, Ap) = " << pw << " at iteration " << it;
            throw NumericalBreakdown(os.str(), it, rnorm / bnorm);
        }
        const double alpha = rz / pw;
        for (std::size_t i = 0; i < n; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * w[i];
        }
        ++it;
        rnorm = norm2(r);
        if (!std::isfinite(rnorm)) throw NumericalBreakdown("pcg_solve: NaN residual", it, rnorm);
        res.residual_history.push_back(rnorm / bnorm);
        if (config.observer) config.observer(it, res.x);

        if (rnorm <= target) {
            true_residual();
            rnorm = norm2(r);
            if (rnorm <= target) break;
            restart_direction();
            rz = dot(r, z);
            continue;
        }
        precondition();
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        if (deflation) {
            std::vector<double> pz = z;
            deflation->project(z, pz);
            for (std::size_t i = 0; i < n; ++i) p[i] = pz[i] + beta * p[i];
        } else {
            for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
        }
    }
    res.iterations = it;
    true_residual();
    res.final_residual = norm2(r) / bnorm;
    if (res.final_residual > config.rel_tolerance) {
        std::ostringstream os;
        os << "pcg_solve: no convergence after " << it << " iterations, relative residual "
           << res.final_residual;
        throw LinearSolverError(os.str(), it, res.final_residual);
    }
    if (config.constant_nullspace) remove_mean(res.x);
    return res;
}

void write_matrix_market(std::ostream& os, const SparseSpd& m) {
    const std::size_t n = m.dimension();
    std::size_t lower = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = m.row_offsets()[i]; k < m.row_offsets()[i + 1]; ++k) {
            if (m.columns()[k] <= i) ++lower;
        }
    }
    os << "%%MatrixMarket matrix coordinate real symmetric\n";
    os << n << " " << n << " " << lower << "\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = m.row_offsets()[i]; k < m.row_offsets()[i + 1]; ++k) {
            const std::size_t j = m.columns()[k];
            if (j <= i) os << i + 1 << " " << j + 1 << " " << m.values()[k] << "\n";
        }
    }
}

void write_matrix_market(const std::filesystem::path& path, const SparseSpd& m) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_matrix_market(os, m);
}

} // namespace bcm
