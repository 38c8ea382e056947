#include "doctest.h"

#include "bcm/coupling.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

using namespace bcm;

namespace {

constexpr double pi = std::numbers::pi;

SimplexMesh gap(std::size_t n_az, std::size_t n_rad = 4, double offset = 0.0) {
    return generate_annulus({2.0, 2.1, n_rad, n_az, "rotor", "stator", offset});
}

SimplexMesh body(std::size_t n_az, std::size_t n_rad = 4, double offset = 0.0) {
    return generate_annulus({2.1, 4.0, n_rad, n_az, "interface", "housing", offset});
}

double angle(const Vec2& x) { return std::atan2(x.y, x.x); }

/// Integral of q over the chain.
double integral(const std::vector<double>& q, const std::vector<double>& lengths) {
    double s = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) s += q[k] * lengths[k];
    return s;
}

double magnitude(const std::vector<double>& q, const std::vector<double>& lengths) {
    double s = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) s += std::abs(q[k]) * lengths[k];
    return s;
}

/// Facet midpoint angles of a tagged chain, in facets_with_tag order.
std::vector<double> facet_angles(const SimplexMesh& m, int tag) {
    std::vector<double> out;
    for (std::size_t fi : m.facets_with_tag(tag)) {
        const auto& f = m.boundary_facets()[fi];
        out.push_back(angle(0.5 * (m.node(f.nodes[0]) + m.node(f.nodes[1]))));
    }
    return out;
}

/// Fluxes sampled from a smooth q(theta) at fluid facet midpoints.
template <class F>
std::vector<double> sample_flux(const SimplexMesh& m, int tag, F q) {
    std::vector<double> out;
    for (double th : facet_angles(m, tag)) out.push_back(q(th));
    return out;
}

/// Scripted code for orchestration tests.
class MockCode : public CodeAdapter {
public:
    MockCode(std::string name, std::vector<double> out, double dt, std::vector<std::string>& log,
             int fail_at = -1)
        : name_(std::move(name)), out_(std::move(out)), dt_(dt), log_(&log), fail_at_(fail_at) {}

    std::string name() const override { return name_; }
    void import_interface(std::span<const double> v) override { in_.assign(v.begin(), v.end()); }
    AdvanceSummary advance() override {
        log_->push_back(name_);
        if (++calls_ == fail_at_) throw std::runtime_error(name_ + " failed");
        time_ += dt_;
        return {1, dt_, true};
    }
    InterfaceData export_interface() const override {
        InterfaceData d;
        d.values = out_;
        d.heat_load = 5.0;
        d.t_min = 300.0;
        d.t_max = 301.0;
        return d;
    }
    double local_time() const override { return time_; }

    std::vector<double> in_;

private:
    std::string name_;
    std::vector<double> out_;
    double dt_;
    std::vector<std::string>* log_;
    int fail_at_;
    int calls_ = 0;
    double time_ = 0.0;
};

/// A gap on a heated body: rotor held at 300 K, stator coupled.
struct SmallCoupledCase {
    SimplexMesh fluid_mesh = gap(32, 2);
    SimplexMesh solid_mesh = body(24, 3, 0.05);
    FlowSolver flow;
    FlowState flow_state;
    HeatSolver heat;
    SolidState solid_state;
    InterfaceMap map;

    explicit SmallCoupledCase(double load, double rpm = 600.0)
        : flow(fluid_mesh, FluidProps{}, bc(rpm)), heat(solid_mesh, SolidProps{}), map(InterfaceMap::build(
              fluid_mesh, fluid_mesh.tag_id("stator"), solid_mesh, solid_mesh.tag_id("interface"))) {
        flow_state = flow.make_state({0, 0}, 300.0);
        solid_state = heat.make_state(300.0);
        heat.set_uniform_load(solid_state, load);
    }

    static FlowBc bc(double rpm) {
        WallBc rotor;
        rotor.angular_velocity = rpm * 2.0 * pi / 60.0;
        rotor.thermal = WallThermal::fixed;
        WallBc stator;
        stator.thermal = WallThermal::coupled;
        return {{"rotor", rotor}, {"stator", stator}};
    }

    CouplingDiagnostics run(std::size_t iters, const std::filesystem::path* csv = nullptr) {
        FluidAdapterOptions fo;
        fo.trigger = {StepCount{20}};
        FluidAdapter fa(flow, flow_state, fluid_mesh.tag_id("stator"), {}, fo);
        SolidAdapter sa(heat, solid_state, solid_mesh.tag_id("interface"));
        SessionOptions so;
        so.outer_iterations = iters;
        if (csv) so.diagnostics_csv = *csv;
        CouplingSession session(fa, sa, &map, so);
        auto d = session.run();
        fluid_history = fa.history();
        return d;
    }

    std::vector<StepReport> fluid_history;
};

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("bcm_coupling_" + name);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("matching interfaces map node to node") {
    auto f = gap(64), s = body(64);
    const auto map = InterfaceMap::build(f, f.tag_id("stator"), s, s.tag_id("interface"));
    CHECK(map.max_deviation() <= 1e-12);
    REQUIRE(map.fluid_node_count() == map.solid_node_count());
    for (std::size_t k = 0; k < map.fluid_node_count(); ++k) {
        const auto& smp = map.temperature_samples()[k];
        const double w = smp.wa > smp.wb ? smp.wa : smp.wb;
        const std::size_t j = smp.wa > smp.wb ? smp.a : smp.b;
        CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(norm(f.node(map.fluid_nodes()[k]) - s.node(map.solid_nodes()[j])) <= 1e-12);
    }
    const auto q = sample_flux(f, f.tag_id("stator"), [](double th) { return 3.0e4; });
    for (double v : map.flux_to_solid(q)) CHECK(v == doctest::Approx(3.0e4).epsilon(1e-13));
}

TEST_CASE("interpolation weights form a partition of unity") {
    auto f = gap(96), s = body(40, 4, 0.03);
    const auto map = InterfaceMap::build(f, f.tag_id("stator"), s, s.tag_id("interface"));
    for (const auto& smp : map.temperature_samples()) {
        CHECK(smp.wa >= 0.0);
        CHECK(smp.wb >= 0.0);
        CHECK(smp.wa + smp.wb == doctest::Approx(1.0).epsilon(1e-15));
    }
    for (const auto& smp : map.flux_samples()) CHECK(smp.wa + smp.wb == doctest::Approx(1.0).epsilon(1e-15));
    const std::vector<double> t300(map.solid_node_count(), 300.0), zero_t(map.solid_node_count(), 0.0);
    for (double t : map.temperature_to_fluid(t300)) CHECK(std::abs(t - 300.0) <= 1e-12);
    for (double t : map.temperature_to_fluid(zero_t)) CHECK(t == 0.0);
    const std::vector<double> zero_q(map.fluid_facet_count(), 0.0);
    for (double q : map.flux_to_solid(zero_q)) CHECK(q == 0.0);
}

TEST_CASE("linear field in angle transfers to second order from a coarse side") {
    // fluid twice as fine as the solid; compare with direct evaluation away from the branch cut
    auto max_error = [](std::size_t n_coarse) {
        auto f = gap(2 * n_coarse), s = body(n_coarse, 4, 0.01);
        const auto map = InterfaceMap::build(f, f.tag_id("stator"), s, s.tag_id("interface"));
        std::vector<double> src;
        for (auto i : map.solid_nodes()) src.push_back(angle(s.node(i)));
        const auto out = map.temperature_to_fluid(src);
        double err = 0.0;
        for (std::size_t k = 0; k < out.size(); ++k) {
            const double th = angle(f.node(map.fluid_nodes()[k]));
            if (std::abs(th) > pi - 0.2) continue;
            err = std::max(err, std::abs(out[k] - th));
        }
        return err;
    };
    const double e32 = max_error(32), e64 = max_error(64);
    const double dth = 2 * pi / 64;
    MESSAGE("linear transfer errors " << e32 << ", " << e64);
    CHECK(e64 <= dth * dth);
    CHECK(e32 / e64 >= 3.0);
}

TEST_CASE("flux transfer conserves the interface integral") {
    auto f = gap(128), s = body(48, 4, 0.02);
    const auto map = InterfaceMap::build(f, f.tag_id("stator"), s, s.tag_id("interface"));
    const int tag = f.tag_id("stator");
    SUBCASE("constant flux stays uniform") {
        const auto q = sample_flux(f, tag, [](double) { return -2.5e5; });
        const auto out = map.flux_to_solid(q);
        const double i_src = integral(q, map.fluid_facet_lengths());
        CHECK(std::abs(integral(out, map.solid_facet_lengths()) - i_src) <= 1e-12 * std::abs(i_src));
        for (double v : out) CHECK(v == doctest::Approx(out[0]).epsilon(1e-12));
        // polygon perimeters differ slightly, the level shifts by their ratio only
        CHECK(out[0] == doctest::Approx(-2.5e5).epsilon(2e-3));
    }
    SUBCASE("sinusoidal flux: exact integral, second-order pointwise") {
        auto q_of = [](double th) { return 1.0e5 * (1.0 + 0.5 * std::sin(3.0 * th)); };
        // both sides refined together, the fluid twice as fine
        auto pointwise = [&](std::size_t n_solid) {
            auto fc = gap(2 * n_solid), sc = body(n_solid, 4, 0.02);
            const auto mp = InterfaceMap::build(fc, tag, sc, sc.tag_id("interface"));
            const auto q = sample_flux(fc, tag, q_of);
            const auto out = mp.flux_to_solid(q);
            const double i_src = integral(q, mp.fluid_facet_lengths());
            CHECK(std::abs(integral(out, mp.solid_facet_lengths()) - i_src) <= 1e-12 * std::abs(i_src));
            const auto th = facet_angles(sc, sc.tag_id("interface"));
            double err = 0.0;
            for (std::size_t k = 0; k < out.size(); ++k) err = std::max(err, std::abs(out[k] - q_of(th[k])));
            return err;
        };
        const double e24 = pointwise(24), e48 = pointwise(48);
        MESSAGE("sinusoidal flux errors " << e24 << ", " << e48);
        CHECK(e24 / e48 >= 3.0);
        CHECK(e48 <= 0.01 * 1.0e5);
    }
    SUBCASE("zero-mean flux takes the additive correction") {
        const auto q = sample_flux(f, tag, [](double th) { return 4.0e4 * std::cos(2.0 * th); });
        const auto out = map.flux_to_solid(q);
        const double i_src = integral(q, map.fluid_facet_lengths());
        CHECK(std::abs(integral(out, map.solid_facet_lengths()) - i_src) <=
              1e-12 * magnitude(q, map.fluid_facet_lengths()));
    }
}

TEST_CASE("conserve_integral chooses scale or shift") {
    const std::vector<double> len{1.0, 1.0};
    std::vector<double> a{1.0, 3.0};
    conserve_integral(a, len, 8.0);
    CHECK(a[0] == 2.0);
    CHECK(a[1] == 6.0);
    std::vector<double> b{1.0, -1.0};
    conserve_integral(b, len, 2.0);
    CHECK(b[0] == 2.0);
    CHECK(b[1] == 0.0);
}

TEST_CASE("interfaces on different circles are rejected") {
    auto f = gap(64);
    auto s = generate_annulus({2.2, 4.0, 4, 64, "interface", "housing"});
    try {
        InterfaceMap::build(f, f.tag_id("stator"), s, s.tag_id("interface"));
        FAIL("expected a mesh error");
    } catch (const MeshError& e) {
        CHECK(std::string(e.what()).find("deviate by 0.1") != std::string::npos);
    }
}

TEST_CASE("wall heat flux across a conducting gap matches the log profile") {
    auto m = generate_annulus({2.0, 2.1, 4, 64, "rotor", "stator"});
    WallBc hot, cold;
    hot.thermal = cold.thermal = WallThermal::fixed;
    hot.temperature = 400.0;
    cold.temperature = 300.0;
    FlowSchemeParams sp;
    sp.dt_cap = 2e-3;
    const FluidProps fp;
    FlowSolver solver(m, fp, {{"rotor", hot}, {"stator", cold}}, sp);
    auto s = solver.make_state({0, 0}, 300.0);
    const auto r = advance_flow_macro_step(solver, s, any_of({{UnknownChange{1e-9}}, {StepCount{20000}}}), 20000);
    CHECK(r.trigger_fired);
    const double b = (300.0 - 400.0) / std::log(2.1 / 2.0);
    for (double q : solver.wall_heat_flux(s, m.tag_id("stator")))
        CHECK(std::abs(q - fp.conductivity * b / 2.1) <= 0.02 * std::abs(fp.conductivity * b / 2.1));
    for (double q : solver.wall_heat_flux(s, m.tag_id("rotor")))
        CHECK(std::abs(q + fp.conductivity * b / 2.0) <= 0.02 * std::abs(fp.conductivity * b / 2.0));
}

TEST_CASE("session call order and trivial sessions") {
    std::vector<std::string> log;
    MockCode fluid("fluid", {1.0, 2.0}, 0.001, log), solid("solid", {300.0, 300.0, 300.0}, 10.0, log);
    SUBCASE("three iterations alternate fluid and solid") {
        SessionOptions so;
        so.outer_iterations = 3;
        CouplingSession session(fluid, solid, nullptr, so);
        const auto d = session.run();
        CHECK(log == std::vector<std::string>{"fluid", "solid", "fluid", "solid", "fluid", "solid"});
        REQUIRE(d.rows.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(d.rows[i].iter == i + 1);
            CHECK(d.rows[i].sum_abs_dT == 0.0);
            CHECK(d.rows[i].tmin_cfd <= d.rows[i].tmax_cfd);
        }
        CHECK(fluid.in_ == std::vector<double>{300.0, 300.0, 300.0});
        CHECK(solid.in_ == std::vector<double>{1.0, 2.0});
        const std::vector<std::string> expect_head{"solid.export", "fluid.import", "fluid.advance", "fluid.export",
                                                   "solid.import", "solid.advance", "solid.export"};
        CHECK(std::equal(expect_head.begin(), expect_head.end(), session.call_log().begin()));
        // clocks stay independent
        CHECK(d.fluid_clock.back() == doctest::Approx(0.003));
        CHECK(d.solid_clock.back() == doctest::Approx(30.0));
    }
    SUBCASE("zero iterations touch nothing") {
        SessionOptions so;
        so.outer_iterations = 0;
        CouplingSession session(fluid, solid, nullptr, so);
        const auto d = session.run();
        CHECK(d.rows.empty());
        CHECK(log.empty());
        CHECK(fluid.local_time() == 0.0);
    }
    SUBCASE("outer trigger on the temperature mismatch stops early") {
        SessionOptions so;
        so.outer_iterations = 20;
        so.outer_trigger = StopTrigger{UnknownChange{1e-6}};
        CouplingSession session(fluid, solid, nullptr, so);
        const auto d = session.run();
        CHECK(d.rows.size() == 1);
        CHECK(d.outer_trigger_fired);
    }
    SUBCASE("invalid relaxation") {
        SessionOptions so;
        so.relaxation = 0.0;
        CHECK_THROWS_AS(CouplingSession(fluid, solid, nullptr, so), std::invalid_argument);
    }
}

TEST_CASE("a failing adapter leaves the rows so far on disk") {
    std::vector<std::string> log;
    MockCode fluid("fluid", {1.0}, 0.001, log), solid("solid", {300.0}, 10.0, log, 3);
    const auto path = temp_file("partial.csv");
    SessionOptions so;
    so.outer_iterations = 5;
    so.diagnostics_csv = path;
    CouplingSession session(fluid, solid, nullptr, so);
    CHECK_THROWS_WITH_AS(session.run(), "solid failed", std::runtime_error);
    const std::string csv = slurp(path);
    CHECK(csv.rfind("iter,sum_abs_dT,q_cfd,q_ctd,tmin_cfd,tmax_cfd,tmin_ctd,tmax_ctd\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    std::filesystem::remove(path);
}

TEST_CASE("diagnostics row format") {
    std::ostringstream os;
    write_diagnostics_row(os, {2, 0.5, 1e7, 2e7, 300, 310, 301, 311});
    CHECK(os.str() == "2,0.5,10000000,20000000,300,310,301,311\n");
}

TEST_CASE("uniform 300 K without loads is a fixed point of the coupled loop") {
    SmallCoupledCase c(0.0);
    const auto d = c.run(3);
    REQUIRE(d.rows.size() == 3);
    for (const auto& r : d.rows) {
        CHECK(r.sum_abs_dT <= 1e-10);
        CHECK(std::abs(r.q_cfd) <= 1e-6);
        CHECK(std::abs(r.q_ctd) <= 1e-6);
    }
}

TEST_CASE("coupled clocks are independent and the run is reproducible") {
    const auto p1 = temp_file("run1.csv"), p2 = temp_file("run2.csv");
    SmallCoupledCase a(2.0e7), b(2.0e7);
    const auto d = a.run(3, &p1);
    b.run(3, &p2);
    double fluid_time = 0.0;
    for (const auto& rep : a.fluid_history) fluid_time += rep.dt;
    CHECK(a.flow_state.time == doctest::Approx(fluid_time).epsilon(1e-14));
    CHECK(a.fluid_history.size() == 60);
    CHECK(a.solid_state.time == doctest::Approx(300.0));
    CHECK(d.fluid_clock.back() < 1.0);
    for (const auto& r : d.rows) {
        CHECK(r.tmin_cfd <= r.tmax_cfd);
        CHECK(r.tmin_ctd <= r.tmax_ctd);
    }
    // heat flows from the loaded solid into the gap
    CHECK(d.rows.back().q_cfd > 0.0);
    CHECK(d.rows.back().tmax_ctd > 300.0);
    CHECK(slurp(p1) == slurp(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}
