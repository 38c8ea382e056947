#include "doctest.h"

#include "bcm/flow.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

using namespace bcm;

namespace {

constexpr double pi = std::numbers::pi;

FluidProps unit_fluid(double mu = 0.05, double k = 1.0) {
    FluidProps p;
    p.density = 1.0;
    p.viscosity = mu;
    p.conductivity = k;
    p.specific_heat = 1.0;
    return p;
}

FlowBc all_walls(const SimplexMesh& m, WallBc w = {}) {
    FlowBc bc;
    for (const auto& t : m.tags()) bc[t.name] = w;
    return bc;
}

/// Divergence-free field vanishing on the unit square boundary.
Vec2 mms_field(const Vec2& x) {
    const double sx = std::sin(pi * x.x), sy = std::sin(pi * x.y);
    return {sx * sx * std::sin(2 * pi * x.y), -std::sin(2 * pi * x.x) * sy * sy};
}

/// rho (v.grad) v - mu lap v for mms_field, derivatives by hand.
Vec2 mms_forcing(const Vec2& x, double rho, double mu) {
    const double s1x = std::sin(pi * x.x), s1y = std::sin(pi * x.y);
    const double s2x = std::sin(2 * pi * x.x), s2y = std::sin(2 * pi * x.y);
    const double c2x = std::cos(2 * pi * x.x), c2y = std::cos(2 * pi * x.y);
    const Vec2 v = mms_field(x);
    const double ux = pi * s2x * s2y, uy = 2 * pi * s1x * s1x * c2y;
    const double wx = -2 * pi * c2x * s1y * s1y, wy = -pi * s2x * s2y;
    const double lap_u = 2 * pi * pi * c2x * s2y - 4 * pi * pi * s1x * s1x * s2y;
    const double lap_w = 4 * pi * pi * s2x * s1y * s1y - 2 * pi * pi * s2x * c2y;
    return {rho * (v.x * ux + v.y * uy) - mu * lap_u, rho * (v.x * wx + v.y * wy) - mu * lap_w};
}

/// Steady prediction-only error against the manufactured field.
double mms_error(std::size_t n) {
    auto m = generate_rectangle({0, 0, 1, 1, n, n});
    const FluidProps fp = unit_fluid();
    FlowSchemeParams sp;
    sp.pressure_preconditioner = Preconditioner::jacobi;
    FlowSolver solver(m, fp, all_walls(m), sp);
    FlowState s = solver.make_state({0, 0}, 300.0);
    for (std::size_t i = 0; i < m.num_nodes(); ++i) {
        s.velocity[i] = mms_field(m.node(i));
        s.source_momentum[i] = m.lumped_area()[i] * mms_forcing(m.node(i), fp.density, fp.viscosity);
    }
    const double dt = 0.8 / static_cast<double>(n);
    double change = 1.0;
    for (int it = 0; it < 20000 && change > 1e-12; ++it) {
        const auto v = solver.prediction(s, dt);
        change = 0.0;
        for (std::size_t i = 0; i < m.num_nodes(); ++i) change = std::max(change, norm(v[i] - s.velocity[i]));
        s.velocity = v;
    }
    double err = 0.0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i)
        err += m.lumped_area()[i] * norm2(s.velocity[i] - mms_field(m.node(i)));
    return std::sqrt(err);
}

} // namespace

TEST_CASE("runge-kutta coefficients") {
    const auto a = rk_coefficients(4);
    REQUIRE(a.size() == 4);
    CHECK(a[0] == 1.0 / 4.0);
    CHECK(a[1] == 1.0 / 3.0);
    CHECK(a[2] == 1.0 / 2.0);
    CHECK(a[3] == 1.0);
    CHECK(rk_coefficients(1) == std::vector<double>{1.0});
}

TEST_CASE("gamma factor clamps the cell Reynolds number") {
    CHECK(gamma_factor(10.0) == 1.0);
    CHECK(gamma_factor(0.5) == 0.5);
    CHECK(gamma_factor(0.0) == 0.0);
}

TEST_CASE("courant timestep") {
    auto m = generate_rectangle({0, 0, 0.1, 0.1, 10, 10});
    FlowSolver solver(m, unit_fluid(), all_walls(m));
    auto s = solver.make_state({0, 0}, 300.0);
    CHECK(solver.compute_timestep(s) == solver.params().dt_cap);
    for (auto& v : s.velocity) v = {60.0, 80.0};
    CHECK(solver.compute_timestep(s) == doctest::Approx(8e-5).epsilon(1e-12));
    FlowSchemeParams fixed;
    fixed.fixed_dt = 3e-4;
    FlowSolver f2(m, unit_fluid(), all_walls(m), fixed);
    CHECK(f2.compute_timestep(s) == 3e-4);
}

TEST_CASE("invalid parameters and missing conditions are rejected") {
    auto m = generate_rectangle({0, 0, 1, 1, 2, 2});
    FlowSchemeParams bad;
    bad.theta = 0.3;
    CHECK_THROWS_AS(FlowSolver(m, unit_fluid(), all_walls(m), bad), std::invalid_argument);
    FlowBc partial = all_walls(m);
    partial.erase("top");
    CHECK_THROWS_AS(FlowSolver(m, unit_fluid(), partial), std::invalid_argument);
    FlowBc extra = all_walls(m);
    extra["nowhere"] = OutflowBc{};
    CHECK_THROWS_AS(FlowSolver(m, unit_fluid(), extra), std::invalid_argument);
    FluidProps fp = unit_fluid();
    fp.viscosity = 0.0;
    CHECK_THROWS_AS(FlowSolver(m, fp, all_walls(m)), std::invalid_argument);
}

TEST_CASE("fluid at rest stays at rest") {
    auto m = generate_annulus({2.0, 2.1, 3, 32});
    FlowSolver solver(m, FluidProps{}, all_walls(m));
    auto s = solver.make_state({0, 0}, 300.0);
    const auto v = solver.prediction(s, 1e-4);
    for (const auto& x : v) CHECK(norm(x) == 0.0);
    const auto rep = solver.step(s, 1e-4);
    CHECK(rep.momentum_residual == 0.0);
    for (double t : s.temperature) CHECK(t == 300.0);
}

TEST_CASE("uniform flow through a channel is a fixed point") {
    auto m = generate_rectangle({0, 0, 4, 1, 16, 4});
    FlowBc bc;
    bc["left"] = InflowBc{{1.0, 0.0}, 350.0};
    bc["right"] = OutflowBc{};
    WallBc moving;
    moving.translation = {1.0, 0.0};
    bc["top"] = moving;
    bc["bottom"] = moving;
    FlowSolver solver(m, unit_fluid(0.01, 0.01), bc);
    auto s = solver.make_state({1.0, 0.0}, 350.0);
    for (int i = 0; i < 5; ++i) solver.step(s, solver.compute_timestep(s));
    for (std::size_t i = 0; i < m.num_nodes(); ++i) {
        CHECK(std::abs(s.velocity[i].x - 1.0) < 1e-9);
        CHECK(std::abs(s.velocity[i].y) < 1e-9);
        CHECK(std::abs(s.temperature[i] - 350.0) < 1e-8);
    }
}

TEST_CASE("manufactured steady solution converges at second order") {
    const double e1 = mms_error(8), e2 = mms_error(16), e3 = mms_error(32);
    const double o1 = std::log2(e1 / e2), o2 = std::log2(e2 / e3);
    MESSAGE("mms errors " << e1 << " " << e2 << " " << e3 << " orders " << o1 << " " << o2);
    CHECK(o2 >= 1.8);
}

double potential_error(std::size_t n) {
    // v* = grad phi with phi = sin(pi x) sin(pi y), zero on an all-outflow boundary
    auto m = generate_rectangle({0, 0, 1, 1, n, n});
    FlowBc bc;
    for (const char* t : {"left", "right", "top", "bottom"}) bc[t] = OutflowBc{};
    FlowSolver solver(m, unit_fluid(), bc);
    std::vector<Vec2> v(m.num_nodes());
    for (std::size_t i = 0; i < m.num_nodes(); ++i) {
        const auto x = m.node(i);
        v[i] = {pi * std::cos(pi * x.x) * std::sin(pi * x.y), pi * std::sin(pi * x.x) * std::cos(pi * x.y)};
    }
    const double dt = 0.5;
    const auto pr = solver.pressure_correction(v, dt);
    double err = 0.0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i) {
        const auto x = m.node(i);
        err = std::max(err, std::abs(pr.increment[i] * dt - std::sin(pi * x.x) * std::sin(pi * x.y)));
    }
    return err;
}

TEST_CASE("pressure increment recovers a smooth potential") {
    const double e1 = potential_error(16), e2 = potential_error(32);
    MESSAGE("potential errors " << e1 << " " << e2);
    CHECK(e2 <= 0.05);
    CHECK(e2 < e1);
}

TEST_CASE("zero divergence gives a zero increment and an unchanged velocity") {
    auto m = generate_annulus({2.0, 2.1, 3, 32});
    FlowSolver solver(m, FluidProps{}, all_walls(m));
    std::vector<Vec2> v(m.num_nodes(), Vec2{});
    const auto pr = solver.pressure_correction(v, 1e-4);
    for (double p : pr.increment) CHECK(p == 0.0);
    std::vector<Vec2> w(m.num_nodes(), Vec2{0.3, -0.2});
    const auto c = solver.velocity_correction(w, pr.increment, 1e-4);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(c[i] == w[i]);
}

TEST_CASE("enclosed cavity returns a mean-zero increment") {
    auto m = generate_rectangle({0, 0, 1, 1, 12, 12});
    for (auto op : {PressureOperator::laplacian, PressureOperator::exact}) {
        FlowSchemeParams sp;
        sp.pressure_operator = op;
        FlowSolver solver(m, unit_fluid(), all_walls(m), sp);
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::vector<Vec2> v(m.num_nodes(), Vec2{});
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!solver.velocity_dirichlet()[i]) v[i] = {u(rng), u(rng)};
        const auto pr = solver.pressure_correction(v, 0.1);
        double sum = 0.0, big = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < m.num_nodes(); ++i) {
            if (!solver.pressure_solved()[i]) continue;
            sum += pr.increment[i];
            big = std::max(big, std::abs(pr.increment[i]));
            ++count;
        }
        CHECK(std::abs(sum / count) < 1e-12 * big);
        const auto c = solver.velocity_correction(v, pr.increment, 0.1);
        if (op == PressureOperator::exact) CHECK(solver.divergence_norm(c) < 1e-8 * solver.divergence_norm(v));
        else CHECK(solver.projection_residual(v, pr.increment, 0.1) < 1e-8 * solver.divergence_norm(v));
    }
}

TEST_CASE("projection removes the divergence of (x, y)") {
    auto m = generate_rectangle({0, 0, 1, 1, 16, 16});
    FlowBc bc;
    for (const auto& t : m.tags()) bc[t.name] = OutflowBc{};
    std::vector<Vec2> v(m.num_nodes());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.node(i);
    SUBCASE("laplacian operator zeroes the stabilised divergence") {
        FlowSolver solver(m, unit_fluid(), bc);
        const double before = solver.divergence_norm(v);
        const auto pr = solver.pressure_correction(v, 1.0);
        CHECK(before == doctest::Approx(2.0));
        CHECK(solver.projection_residual(v, pr.increment, 1.0) <= 1e-8);
    }
    SUBCASE("exact operator zeroes the Galerkin divergence") {
        FlowSchemeParams sp;
        sp.pressure_operator = PressureOperator::exact;
        FlowSolver solver(m, unit_fluid(), bc, sp);
        const auto pr = solver.pressure_correction(v, 1.0);
        const auto c = solver.velocity_correction(v, pr.increment, 1.0);
        CHECK(solver.divergence_norm(c) <= 1e-8);
    }
}

TEST_CASE("conduction strip reaches the linear profile") {
    auto m = generate_rectangle({0, 0, 1, 1.0 / 64, 64, 1});
    FlowBc bc;
    WallBc hot, cold, insulated;
    hot.thermal = WallThermal::fixed;
    hot.temperature = 400.0;
    cold.thermal = WallThermal::fixed;
    cold.temperature = 300.0;
    bc["left"] = hot;
    bc["right"] = cold;
    bc["top"] = insulated;
    bc["bottom"] = insulated;
    FlowSchemeParams sp;
    sp.fixed_dt = 0.01;
    FlowSolver solver(m, unit_fluid(), bc, sp);
    auto s = solver.make_state({0, 0}, 300.0);
    for (int i = 0; i < 600; ++i) s.temperature = solver.advance_temperature(s, 0.01);
    double err = 0.0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i)
        err = std::max(err, std::abs(s.temperature[i] - (400.0 - 100.0 * m.node(i).x)));
    CHECK(err / 100.0 < 0.01);
}

TEST_CASE("hot inflow front reaches the outflow monotonically") {
    auto m = generate_rectangle({0, 0, 4, 1, 32, 8});
    FlowBc bc;
    bc["left"] = InflowBc{{1.0, 0.0}, 400.0};
    bc["right"] = OutflowBc{};
    WallBc moving;
    moving.translation = {1.0, 0.0};
    bc["top"] = moving;
    bc["bottom"] = moving;
    FlowSchemeParams sp;
    sp.dt_cap = 1.0;
    FlowSolver solver(m, unit_fluid(0.01, 0.1), bc, sp); // cell Peclet 1.25
    auto s = solver.make_state({1.0, 0.0}, 300.0);
    std::size_t probe = 0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i)
        if (norm(m.node(i) - Vec2{4.0, 0.5}) < 1e-12) probe = i;
    double prev = s.temperature[probe], lo = 1e300, hi = -1e300;
    bool monotone = true;
    for (int i = 0; i < 100; ++i) {
        solver.step(s, solver.compute_timestep(s));
        const double t = s.temperature[probe];
        if (t < prev - 1e-6) monotone = false;
        prev = t;
        for (double x : s.temperature) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    CHECK(monotone);
    CHECK(prev == doctest::Approx(400.0).epsilon(0.01));
    // discrete max principle with 5% slack
    CHECK(lo >= 300.0 - 5.0);
    CHECK(hi <= 400.0 + 5.0);
}

TEST_CASE("wall heat flux from the adjacent element gradient") {
    auto m = generate_rectangle({0, 0, 1, 0.2, 8, 4});
    FluidProps fp = unit_fluid(0.05, 7.0);
    FlowBc bc = all_walls(m);
    FlowSolver solver(m, fp, bc);
    auto s = solver.make_state({0, 0}, 300.0);
    for (double q : solver.wall_heat_flux(s, m.tag_id("bottom"))) CHECK(q == 0.0);
    const double g = 25.0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i) s.temperature[i] = 300.0 + g * m.node(i).y;
    for (double q : solver.wall_heat_flux(s, m.tag_id("bottom"))) CHECK(q == doctest::Approx(-fp.conductivity * g));
    for (double q : solver.wall_heat_flux(s, m.tag_id("top"))) CHECK(q == doctest::Approx(fp.conductivity * g));
}

TEST_CASE("macro step honours the step budget and quasi-steady triggers") {
    auto m = generate_annulus({2.0, 2.1, 2, 24});
    FlowSolver solver(m, FluidProps{}, all_walls(m));
    SUBCASE("500 steps") {
        auto s = solver.make_state({0, 0}, 300.0);
        std::ostringstream csv;
        write_residual_header(csv);
        const auto r = advance_flow_macro_step(solver, s, {StepCount{500}}, 100000, {}, &csv);
        CHECK(r.steps == 500);
        CHECK(r.trigger_fired);
        CHECK(s.steps == 500);
        const std::string out = csv.str();
        CHECK(out.rfind("step,time,dt,momentum_residual,divergence_norm\n", 0) == 0);
        CHECK(std::count(out.begin(), out.end(), '\n') == 501);
    }
    SUBCASE("flow at rest fires the residual trigger at the first check") {
        auto s = solver.make_state({0, 0}, 300.0);
        const auto r = advance_flow_macro_step(solver, s, any_of({{ResidualDecrease{1e3}}, {StepCount{500}}}), 1000);
        CHECK(r.steps == 1);
        CHECK(r.trigger_fired);
    }
    SUBCASE("sources are reset and filled before every step") {
        auto s = solver.make_state({0, 0}, 300.0);
        std::size_t calls = 0;
        advance_flow_macro_step(solver, s, {StepCount{3}}, 10, [&](FlowState& st, double dt) {
            CHECK(dt > 0.0);
            for (const auto& f : st.source_momentum) CHECK(norm(f) == 0.0);
            ++calls;
        });
        CHECK(calls == 3);
    }
}

TEST_CASE("couette flow between a rotating inner wall and a fixed outer wall") {
    auto m = generate_annulus({2.0, 2.1, 4, 128, "rotor", "stator"});
    FlowBc bc;
    WallBc rotor;
    const double omega = 600.0 * 2.0 * pi / 60.0;
    rotor.angular_velocity = omega;
    bc["rotor"] = rotor;
    bc["stator"] = WallBc{};
    FlowSolver solver(m, FluidProps{}, bc);
    auto s = solver.make_state({0, 0}, 300.0);
    const auto r = advance_flow_macro_step(solver, s, any_of({{UnknownChange{1e-9}}, {StepCount{4000}}}), 4000);
    CHECK(r.trigger_fired);
    const double r1 = 2.0, r2 = 2.1;
    const double a = -omega * r1 * r1 / (r2 * r2 - r1 * r1), b = omega * r1 * r1 * r2 * r2 / (r2 * r2 - r1 * r1);
    double err = 0.0;
    for (std::size_t i = 0; i < m.num_nodes(); ++i) {
        const Vec2 x = m.node(i);
        const double rr = norm(x);
        const double vt = cross(x, s.velocity[i]) / rr;
        err = std::max(err, std::abs(vt - (a * rr + b / rr)));
    }
    MESSAGE("couette Linf " << err / (omega * r1) << " after " << r.steps << " steps");
    CHECK(err / (omega * r1) < 0.02);
    const double hmin = m.min_spacing();
    double vmax = 0.0;
    for (const auto& v : s.velocity) vmax = std::max(vmax, norm(v));
    for (const auto& h : r.history) CHECK(h.divergence_norm <= 1e-6 * vmax / hmin);
}
