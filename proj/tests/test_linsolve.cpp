#include "doctest.h"

#include "bcm/linsolve.hpp"
#include "bcm/mesh.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

using namespace bcm;

namespace {

SparseSpd laplacian_1d(std::size_t n, bool neumann) {
    std::vector<SparseSpd::Triplet> t;
    for (std::size_t i = 0; i < n; ++i) {
        double d = 2.0;
        if (neumann && (i == 0 || i + 1 == n)) d = 1.0;
        t.push_back({i, i, d});
        if (i + 1 < n) {
            t.push_back({i, i + 1, -1.0});
            t.push_back({i + 1, i, -1.0});
        }
    }
    return SparseSpd::from_triplets(n, std::move(t));
}

/// P1 stiffness of a mesh plus `shift` times the lumped mass.
SparseSpd stiffness(const SimplexMesh& m, double shift) {
    std::vector<SparseSpd::Triplet> t;
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& g = m.shape_gradients(e);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                t.push_back({m.element(e)[a], m.element(e)[b], m.area(e) * dot(g[a], g[b])});
    }
    for (std::size_t i = 0; i < m.num_nodes(); ++i) t.push_back({i, i, shift * m.lumped_area()[i]});
    return SparseSpd::from_triplets(m.num_nodes(), std::move(t));
}

double dense_relative_error(const SparseSpd& a, const std::vector<double>& b, const std::vector<double>& x) {
    const auto n = static_cast<Eigen::Index>(a.dimension());
    Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < a.dimension(); ++i)
        for (std::size_t k = a.row_offsets()[i]; k < a.row_offsets()[i + 1]; ++k)
            dense(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a.columns()[k])) = a.values()[k];
    const Eigen::VectorXd eb = Eigen::Map<const Eigen::VectorXd>(b.data(), n);
    const Eigen::VectorXd ref = dense.fullPivLu().solve(eb);
    const Eigen::VectorXd got = Eigen::Map<const Eigen::VectorXd>(x.data(), n);
    return (ref - got).norm() / ref.norm();
}

} // namespace

TEST_CASE("identity system converges in one iteration") {
    std::vector<SparseSpd::Triplet> t;
    for (std::size_t i = 0; i < 5; ++i) t.push_back({i, i, 1.0});
    auto a = SparseSpd::from_triplets(5, t);
    std::vector<double> b{1, -2, 3, 0.5, 7};
    auto r = pcg_solve(a, b, {}, {});
    CHECK(r.iterations <= 1);
    for (std::size_t i = 0; i < 5; ++i) CHECK(r.x[i] == doctest::Approx(b[i]));
}

TEST_CASE("3x3 tridiagonal system") {
    auto a = laplacian_1d(3, false);
    std::vector<double> b{1, 0, 0};
    auto r = pcg_solve(a, b, {}, {});
    CHECK(r.x[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(r.x[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.x[2] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.final_residual <= 1e-10);
}

TEST_CASE("pure Neumann 1D Laplacian with compatible rhs") {
    const std::size_t n = 100;
    auto a = laplacian_1d(n, true);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    std::vector<double> b(n);
    for (auto& v : b) v = g(rng);
    double mean = 0.0;
    for (double v : b) mean += v / n;
    for (auto& v : b) v -= mean;
    SolverConfig cfg;
    cfg.constant_nullspace = true;
    auto r = pcg_solve(a, b, {}, cfg);
    CHECK(r.final_residual < 1e-10);
    double xm = 0.0;
    for (double v : r.x) xm += v;
    CHECK(std::abs(xm) < 1e-9);
    auto ax = a.multiply(r.x);
    double res = 0.0, bn = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        res += (ax[i] - b[i]) * (ax[i] - b[i]);
        bn += b[i] * b[i];
    }
    CHECK(std::sqrt(res / bn) < 1e-10);
}

TEST_CASE("zero rhs returns zero") {
    auto a = laplacian_1d(4, false);
    std::vector<double> b(4, 0.0), x0{1, 2, 3, 4};
    auto r = pcg_solve(a, b, x0, {});
    for (double v : r.x) CHECK(v == 0.0);
    CHECK(r.iterations == 0);
}

TEST_CASE("pcg matches a dense direct solve on random SPD systems") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_int_distribution<int> dim(2, 50);
    for (int trial = 0; trial < 20; ++trial) {
        const auto n = static_cast<std::size_t>(dim(rng));
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < b.rows(); ++i)
            for (Eigen::Index j = 0; j < b.cols(); ++j)
                if (u(rng) > 0.6) b(i, j) = u(rng);
        Eigen::MatrixXd spd = b * b.transpose() + Eigen::MatrixXd::Identity(b.rows(), b.cols()) * 0.5;
        std::vector<SparseSpd::Triplet> t;
        for (Eigen::Index i = 0; i < spd.rows(); ++i)
            for (Eigen::Index j = 0; j < spd.cols(); ++j)
                if (spd(i, j) != 0.0 || i == j)
                    t.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), spd(i, j)});
        auto a = SparseSpd::from_triplets(n, t);
        a.validate();
        std::vector<double> rhs(n);
        for (auto& v : rhs) v = u(rng);
        auto r = pcg_solve(a, rhs, {}, {});
        CHECK(dense_relative_error(a, rhs, r.x) < 1e-8);
    }
}

TEST_CASE("error A-norm is monotonically non-increasing") {
    auto m = generate_annulus({1.0, 2.0, 4, 24});
    auto a = stiffness(m, 3.0);
    const std::size_t n = a.dimension();
    std::vector<double> exact(n);
    for (std::size_t i = 0; i < n; ++i) exact[i] = std::sin(3.0 * m.node(i).x) + m.node(i).y;
    auto b = a.multiply(exact);
    for (auto pre : {Preconditioner::jacobi, Preconditioner::deflated_jacobi}) {
        std::vector<double> errs;
        SolverConfig cfg;
        cfg.preconditioner = pre;
        cfg.deflation_groups.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double th = std::atan2(m.node(i).y, m.node(i).x) + std::numbers::pi;
            cfg.deflation_groups[i] = std::min<std::size_t>(3, static_cast<std::size_t>(th / (0.5 * std::numbers::pi)));
        }
        cfg.observer = [&](std::size_t, std::span<const double> x) {
            std::vector<double> e(n);
            for (std::size_t i = 0; i < n; ++i) e[i] = x[i] - exact[i];
            const auto ae = a.multiply(e);
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += e[i] * ae[i];
            errs.push_back(std::sqrt(s));
        };
        auto r = pcg_solve(a, b, {}, cfg);
        REQUIRE(errs.size() >= 2);
        for (std::size_t k = 1; k < errs.size(); ++k) CHECK(errs[k] <= errs[k - 1] * (1.0 + 1e-12) + 1e-14);
        CHECK(r.final_residual <= 1e-10);
    }
}

TEST_CASE("deflation with a single group spans the constants") {
    auto a = laplacian_1d(6, false);
    auto d = build_deflation(a, std::vector<std::size_t>(6, 0));
    CHECK(d.num_groups() == 1);
    double total = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) total += a.at(i, j);
    CHECK(d.coarse_matrix()[0] == doctest::Approx(total));
}

TEST_CASE("deflation validation") {
    auto a = laplacian_1d(4, false);
    CHECK_THROWS_AS(build_deflation(a, {0, 1, kNoGroup, 1}), std::invalid_argument);
    CHECK_THROWS_AS(build_deflation(a, {0, 2, 2, 0}), std::invalid_argument); // group 1 empty
    CHECK_THROWS_AS(build_deflation(a, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("deflation reduces iterations and keeps the solution") {
    // pure-Neumann Laplacian on the thin gap annulus, broadband compatible rhs
    auto m = generate_annulus({2.0, 2.1, 4, 128});
    auto a = stiffness(m, 0.0);
    const std::size_t n = a.dimension();
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = m.lumped_area()[i] * g(rng);
    SolverConfig plain;
    plain.constant_nullspace = true;
    auto r0 = pcg_solve(a, b, {}, plain);
    SolverConfig defl = plain;
    defl.preconditioner = Preconditioner::deflated_jacobi;
    defl.deflation_groups.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double th = std::atan2(m.node(i).y, m.node(i).x) + std::numbers::pi;
        defl.deflation_groups[i] = std::min<std::size_t>(15, static_cast<std::size_t>(th / (2.0 * std::numbers::pi / 16)));
    }
    auto r1 = pcg_solve(a, b, {}, defl);
    CHECK(r1.iterations < r0.iterations);
    CHECK(r1.final_residual <= 1e-10);
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        diff += (r1.x[i] - r0.x[i]) * (r1.x[i] - r0.x[i]);
        ref += r0.x[i] * r0.x[i];
    }
    // both iterates sit within tol of the same solution in residual; the
    // solution gap is bounded by the residual gap times the conditioning
    const auto ad = a.multiply(std::vector<double>(r1.x));
    const auto a0 = a.multiply(std::vector<double>(r0.x));
    double rdiff = 0.0, bn = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        rdiff += (ad[i] - a0[i]) * (ad[i] - a0[i]);
        bn += b[i] * b[i];
    }
    CHECK(std::sqrt(rdiff / bn) <= 10 * 1e-10);
    CHECK(std::sqrt(diff / ref) < 1e-6);
}

TEST_CASE("non-convergence and breakdown are reported") {
    auto a = laplacian_1d(50, false);
    std::vector<double> b(50, 1.0);
    SolverConfig cfg;
    cfg.max_iterations = 2;
    try {
        pcg_solve(a, b, {}, cfg);
        FAIL("expected LinearSolverError");
    } catch (const LinearSolverError& e) {
        CHECK(e.iterations() == 2);
        CHECK(e.residual() > 1e-10);
    }
    b[3] = std::nan("");
    CHECK_THROWS_AS(pcg_solve(a, b, {}, {}), NumericalBreakdown);
    SolverConfig bad;
    bad.rel_tolerance = 0.0;
    CHECK_THROWS_AS(pcg_solve(a, std::vector<double>(50, 1.0), {}, bad), std::invalid_argument);
}

TEST_CASE("structural validation") {
    auto ok = laplacian_1d(3, false);
    CHECK_NOTHROW(ok.validate());
    auto asym = SparseSpd::from_triplets(2, {{0, 0, 1.0}, {1, 1, 1.0}, {0, 1, 0.5}});
    CHECK_THROWS_AS(asym.validate(), std::invalid_argument);
    auto neg = SparseSpd::from_triplets(2, {{0, 0, -1.0}, {1, 1, 1.0}});
    CHECK_THROWS_AS(neg.validate(), std::invalid_argument);
}

TEST_CASE("matrix market dump") {
    auto a = laplacian_1d(3, false);
    std::ostringstream os;
    write_matrix_market(os, a);
    const auto s = os.str();
    CHECK(s.rfind("%%MatrixMarket matrix coordinate real symmetric\n3 3 5\n", 0) == 0);
    CHECK(s.find("2 1 -1") != std::string::npos);
}
