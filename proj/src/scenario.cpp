#include "bcm/scenario.hpp"

#include "bcm/vtk.hpp"

#include <json.hpp>
#include <toml.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

namespace bcm {

namespace fs = std::filesystem;

namespace {

std::string join_errors(const std::vector<std::string>& errors) {
    std::string msg = "invalid scenario config:";
    for (const auto& e : errors) msg += "\n  " + e;
    return msg;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::vector<std::string> kSections{"fluid_mesh", "solid_mesh",      "geometry", "fluid",    "inflow",
                                         "rotation",   "solid",           "particles", "flow_scheme",
                                         "heat_scheme", "particle_scheme", "coupling", "output"};

/// Reads keys by dotted path, records which ones the schema knows and
/// collects one message per problem.
class Reader {
public:
    Reader(const toml::table& table, std::vector<std::string>& errors) : table_(&table), errors_(&errors) {}

    void get(const std::string& path, double& out, bool required = false) {
        auto node = find(path, required);
        if (!node) return;
        if (auto v = node.value<double>(); v && (node.is_floating_point() || node.is_integer()))
            out = *v;
        else
            errors_->push_back(path + ": expected a number");
    }

    void get(const std::string& path, std::size_t& out, bool required = false) {
        std::int64_t v = 0;
        if (get_integer(path, v, required)) out = static_cast<std::size_t>(v);
    }

    void get(const std::string& path, bool& out, bool required = false) {
        auto node = find(path, required);
        if (!node) return;
        if (auto v = node.value_exact<bool>())
            out = *v;
        else
            errors_->push_back(path + ": expected true or false");
    }

    void get(const std::string& path, std::string& out, bool required = false) {
        auto node = find(path, required);
        if (!node) return;
        if (auto v = node.value_exact<std::string>())
            out = *v;
        else
            errors_->push_back(path + ": expected a string");
    }

    void report_unknown() const {
        for (auto&& [key, node] : *table_) {
            const std::string k(key.str());
            if (const auto* sub = node.as_table()) {
                if (std::find(kSections.begin(), kSections.end(), k) == kSections.end()) {
                    errors_->push_back("unknown section [" + k + "]");
                    continue;
                }
                for (auto&& [inner, _] : *sub) {
                    const std::string path = k + "." + std::string(inner.str());
                    if (!known_.count(path)) errors_->push_back("unknown key '" + path + "'");
                }
            } else if (!known_.count(k)) {
                errors_->push_back("unknown key '" + k + "'");
            }
        }
    }

private:
    toml::node_view<const toml::node> find(const std::string& path, bool required) {
        known_.insert(path);
        auto node = table_->at_path(path);
        if (!node && required) errors_->push_back("missing required key '" + path + "'");
        return node;
    }

    bool get_integer(const std::string& path, std::int64_t& out, bool required) {
        auto node = find(path, required);
        if (!node) return false;
        auto v = node.value_exact<std::int64_t>();
        if (!v) {
            errors_->push_back(path + ": expected an integer");
            return false;
        }
        if (*v < 0) {
            errors_->push_back(path + ": must not be negative");
            return false;
        }
        out = *v;
        return true;
    }

    const toml::table* table_;
    std::vector<std::string>* errors_;
    std::set<std::string> known_;
};

void read_annulus(Reader& r, const std::string& s, AnnulusSection& a) {
    r.get(s + ".inner_radius", a.inner_radius, true);
    r.get(s + ".outer_radius", a.outer_radius, true);
    r.get(s + ".n_radial", a.n_radial);
    r.get(s + ".n_azimuthal", a.n_azimuthal);
    r.get(s + ".angle_offset", a.angle_offset);
}

void check_annulus(const AnnulusSection& a, const std::string& s, std::vector<std::string>& e) {
    if (!(a.inner_radius > 0.0)) e.push_back(s + ".inner_radius: must be positive");
    if (!(a.outer_radius > a.inner_radius))
        e.push_back(s + ".outer_radius: must exceed " + s + ".inner_radius (" + num(a.inner_radius) + ")");
    if (a.n_radial < 1) e.push_back(s + ".n_radial: must be at least 1");
    if (a.n_azimuthal < 3) e.push_back(s + ".n_azimuthal: must be at least 3");
    if (!std::isfinite(a.angle_offset)) e.push_back(s + ".angle_offset: must be finite");
}

void positive(double v, const std::string& path, std::vector<std::string>& e) {
    if (!(v > 0.0) || !std::isfinite(v)) e.push_back(path + ": must be positive");
}

void non_negative(double v, const std::string& path, std::vector<std::string>& e) {
    if (!(v >= 0.0) || !std::isfinite(v)) e.push_back(path + ": must not be negative");
}

template <class F>
void delegate(const std::string& section, F check, std::vector<std::string>& e) {
    try {
        check();
    } catch (const std::exception& ex) {
        e.push_back(section + ": " + ex.what());
    }
}

toml::table annulus_table(const AnnulusSection& a) {
    return toml::table{{"inner_radius", a.inner_radius},
                       {"outer_radius", a.outer_radius},
                       {"n_radial", static_cast<std::int64_t>(a.n_radial)},
                       {"n_azimuthal", static_cast<std::int64_t>(a.n_azimuthal)},
                       {"angle_offset", a.angle_offset}};
}

constexpr const char* kRotor = "rotor";
constexpr const char* kStator = "stator";
constexpr const char* kInterface = "interface";
constexpr const char* kOuter = "outer";

AnnulusSpec annulus_spec(const AnnulusSection& a, const char* inner, const char* outer) {
    AnnulusSpec spec;
    spec.inner_radius = a.inner_radius;
    spec.outer_radius = a.outer_radius;
    spec.n_radial = a.n_radial;
    spec.n_azimuthal = a.n_azimuthal;
    spec.angle_offset = a.angle_offset;
    spec.inner_tag = inner;
    spec.outer_tag = outer;
    return spec;
}

double omega(const ScenarioConfig& c) { return c.rpm * 2.0 * std::numbers::pi / 60.0; }

FlowBc flow_bc(const ScenarioConfig& c) {
    WallBc rotor;
    rotor.angular_velocity = omega(c);
    rotor.thermal = WallThermal::fixed;
    rotor.temperature = c.inflow.temperature;
    WallBc stator;
    stator.thermal = c.coupling.enabled ? WallThermal::coupled : WallThermal::fixed;
    stator.temperature = c.inflow.temperature;
    return {{kRotor, rotor}, {kStator, stator}};
}

std::string iso_time(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        if (!out.flush()) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::string numbered(const std::string& stem, std::size_t iter, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_iter_%04zu.%s", stem.c_str(), iter, ext);
    return buf;
}

} // namespace

ConfigError::ConfigError(std::vector<std::string> errors) : std::runtime_error(join_errors(errors)),
                                                            errors_(std::move(errors)) {}

ScenarioConfig parse_config(const std::string& text) {
    toml::table table;
    try {
        table = toml::parse(text);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "parse error at line " << e.source().begin.line << ", column " << e.source().begin.column << ": "
           << e.description();
        throw ConfigError({os.str()});
    }

    ScenarioConfig c;
    std::vector<std::string> errors;
    Reader r(table, errors);
    r.get("units", c.units, true);
    read_annulus(r, "fluid_mesh", c.fluid_mesh);
    read_annulus(r, "solid_mesh", c.solid_mesh);
    r.get("geometry.depth", c.depth);
    r.get("fluid.density", c.fluid.density, true);
    r.get("fluid.viscosity", c.fluid.viscosity, true);
    r.get("fluid.conductivity", c.fluid.conductivity, true);
    r.get("fluid.specific_heat", c.fluid.specific_heat, true);
    r.get("fluid.reference_pressure", c.fluid.reference_pressure);
    r.get("inflow.velocity", c.inflow.velocity);
    r.get("inflow.temperature", c.inflow.temperature);
    r.get("rotation.rpm", c.rpm, true);
    r.get("solid.density", c.solid.density, true);
    r.get("solid.specific_heat", c.solid.specific_heat, true);
    r.get("solid.conductivity", c.solid.conductivity, true);
    r.get("solid.volumetric_load", c.solid.volumetric_load, true);
    r.get("solid.initial_temperature", c.solid.initial_temperature);
    auto& p = c.particles;
    r.get("particles.enabled", p.enabled);
    r.get("particles.density", p.density);
    r.get("particles.specific_heat", p.specific_heat);
    r.get("particles.boiling_temp", p.boiling_temp);
    r.get("particles.latent_heat", p.latent_heat);
    r.get("particles.min_diameter", p.min_diameter);
    r.get("particles.diameter", p.diameter);
    r.get("particles.rate", p.rate);
    r.get("particles.multiplicity", p.multiplicity);
    r.get("particles.seed", p.seed);
    r.get("particles.injection_angle", p.injection_angle);
    auto& f = c.flow_scheme;
    r.get("flow_scheme.rk_stages", f.rk_stages);
    r.get("flow_scheme.theta", f.theta);
    r.get("flow_scheme.courant", f.courant);
    r.get("flow_scheme.dt_cap", f.dt_cap);
    r.get("flow_scheme.dissipation", f.dissipation);
    r.get("flow_scheme.pressure_tolerance", f.pressure_tolerance);
    r.get("flow_scheme.deflation_sectors", f.deflation_sectors);
    r.get("heat_scheme.theta", c.heat_scheme.theta);
    r.get("heat_scheme.dt", c.heat_scheme.dt);
    r.get("heat_scheme.tolerance", c.heat_scheme.tolerance);
    auto& ps = c.particle_scheme;
    r.get("particle_scheme.rk_stages", ps.rk_stages);
    r.get("particle_scheme.limit", ps.limit);
    r.get("particle_scheme.two_way", ps.two_way);
    r.get("particle_scheme.merge_above", ps.merge_above);
    r.get("particle_scheme.split_below", ps.split_below);
    auto& cp = c.coupling;
    r.get("coupling.enabled", cp.enabled);
    r.get("coupling.outer_iterations", cp.outer_iterations);
    r.get("coupling.relaxation", cp.relaxation);
    r.get("coupling.fluid_steps", cp.fluid_steps);
    r.get("coupling.solid_steps", cp.solid_steps);
    r.get("coupling.outer_tolerance", cp.outer_tolerance);
    r.get("output.directory", c.output.directory);
    r.get("output.vtk_every", c.output.vtk_every);
    r.get("output.parcels_every", c.output.parcels_every);
    r.report_unknown();
    if (!errors.empty()) throw ConfigError(std::move(errors));
    validate_config(c);
    return c;
}

ScenarioConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError({"cannot read " + path.string()});
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void validate_config(const ScenarioConfig& c) {
    std::vector<std::string> e;
    if (c.units != "cgs") e.push_back("units: expected \"cgs\", got \"" + c.units + "\"");
    positive(c.depth, "geometry.depth", e);
    check_annulus(c.fluid_mesh, "fluid_mesh", e);
    check_annulus(c.solid_mesh, "solid_mesh", e);
    const double r_if = c.fluid_mesh.outer_radius;
    if (!(std::abs(c.solid_mesh.inner_radius - r_if) <= 1e-8 * std::max(1.0, std::abs(r_if))))
        e.push_back("solid_mesh.inner_radius: " + num(c.solid_mesh.inner_radius) +
                    " does not meet fluid_mesh.outer_radius " + num(r_if) + " at the interface");
    positive(c.fluid.density, "fluid.density", e);
    positive(c.fluid.viscosity, "fluid.viscosity", e);
    positive(c.fluid.conductivity, "fluid.conductivity", e);
    positive(c.fluid.specific_heat, "fluid.specific_heat", e);
    positive(c.fluid.reference_pressure, "fluid.reference_pressure", e);
    non_negative(c.inflow.velocity, "inflow.velocity", e);
    positive(c.inflow.temperature, "inflow.temperature", e);
    if (!std::isfinite(c.rpm)) e.push_back("rotation.rpm: must be finite");
    positive(c.solid.density, "solid.density", e);
    positive(c.solid.specific_heat, "solid.specific_heat", e);
    positive(c.solid.conductivity, "solid.conductivity", e);
    non_negative(c.solid.volumetric_load, "solid.volumetric_load", e);
    positive(c.solid.initial_temperature, "solid.initial_temperature", e);
    const auto& p = c.particles;
    delegate("particles", [&] { particle_props(c).validate(); }, e);
    if (!(p.diameter > p.min_diameter) || !std::isfinite(p.diameter))
        e.push_back("particles.diameter: must exceed particles.min_diameter (" + num(p.min_diameter) + ")");
    non_negative(p.rate, "particles.rate", e);
    positive(p.multiplicity, "particles.multiplicity", e);
    if (!std::isfinite(p.injection_angle)) e.push_back("particles.injection_angle: must be finite");
    if (p.seed > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
        e.push_back("particles.seed: must fit in a signed 64-bit integer");
    delegate("flow_scheme", [&] { flow_params(c).validate(); }, e);
    delegate("heat_scheme", [&] {
        HeatSchemeParams h{c.heat_scheme.theta, c.heat_scheme.dt, c.heat_scheme.tolerance};
        h.validate();
    }, e);
    delegate("particle_scheme", [&] { particle_params(c).validate(); }, e);
    const auto& cp = c.coupling;
    if (!(cp.relaxation > 0.0 && cp.relaxation <= 1.0)) e.push_back("coupling.relaxation: must lie in (0, 1]");
    if (cp.fluid_steps < 1) e.push_back("coupling.fluid_steps: must be at least 1");
    if (cp.solid_steps < 1) e.push_back("coupling.solid_steps: must be at least 1");
    non_negative(cp.outer_tolerance, "coupling.outer_tolerance", e);
    if (c.output.directory.empty()) e.push_back("output.directory: must not be empty");
    if (!e.empty()) throw ConfigError(std::move(e));
}

std::string serialize_config(const ScenarioConfig& c) {
    const auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
    const auto& p = c.particles;
    const auto& f = c.flow_scheme;
    const auto& ps = c.particle_scheme;
    const auto& cp = c.coupling;
    toml::table t{
        {"units", c.units},
        {"fluid_mesh", annulus_table(c.fluid_mesh)},
        {"solid_mesh", annulus_table(c.solid_mesh)},
        {"geometry", toml::table{{"depth", c.depth}}},
        {"fluid", toml::table{{"density", c.fluid.density},
                              {"viscosity", c.fluid.viscosity},
                              {"conductivity", c.fluid.conductivity},
                              {"specific_heat", c.fluid.specific_heat},
                              {"reference_pressure", c.fluid.reference_pressure}}},
        {"inflow", toml::table{{"velocity", c.inflow.velocity}, {"temperature", c.inflow.temperature}}},
        {"rotation", toml::table{{"rpm", c.rpm}}},
        {"solid", toml::table{{"density", c.solid.density},
                              {"specific_heat", c.solid.specific_heat},
                              {"conductivity", c.solid.conductivity},
                              {"volumetric_load", c.solid.volumetric_load},
                              {"initial_temperature", c.solid.initial_temperature}}},
        {"particles", toml::table{{"enabled", p.enabled},
                                  {"density", p.density},
                                  {"specific_heat", p.specific_heat},
                                  {"boiling_temp", p.boiling_temp},
                                  {"latent_heat", p.latent_heat},
                                  {"min_diameter", p.min_diameter},
                                  {"diameter", p.diameter},
                                  {"rate", p.rate},
                                  {"multiplicity", p.multiplicity},
                                  {"seed", static_cast<std::int64_t>(p.seed)},
                                  {"injection_angle", p.injection_angle}}},
        {"flow_scheme", toml::table{{"rk_stages", i64(f.rk_stages)},
                                    {"theta", f.theta},
                                    {"courant", f.courant},
                                    {"dt_cap", f.dt_cap},
                                    {"dissipation", f.dissipation},
                                    {"pressure_tolerance", f.pressure_tolerance},
                                    {"deflation_sectors", i64(f.deflation_sectors)}}},
        {"heat_scheme", toml::table{{"theta", c.heat_scheme.theta},
                                    {"dt", c.heat_scheme.dt},
                                    {"tolerance", c.heat_scheme.tolerance}}},
        {"particle_scheme", toml::table{{"rk_stages", i64(ps.rk_stages)},
                                        {"limit", ps.limit},
                                        {"two_way", ps.two_way},
                                        {"merge_above", i64(ps.merge_above)},
                                        {"split_below", i64(ps.split_below)}}},
        {"coupling", toml::table{{"enabled", cp.enabled},
                                 {"outer_iterations", i64(cp.outer_iterations)},
                                 {"relaxation", cp.relaxation},
                                 {"fluid_steps", i64(cp.fluid_steps)},
                                 {"solid_steps", i64(cp.solid_steps)},
                                 {"outer_tolerance", cp.outer_tolerance}}},
        {"output", toml::table{{"directory", c.output.directory},
                               {"vtk_every", i64(c.output.vtk_every)},
                               {"parcels_every", i64(c.output.parcels_every)}}},
    };
    std::ostringstream os;
    os << t << '\n';
    return os.str();
}

std::string config_hash(const ScenarioConfig& config) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : serialize_config(config)) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

FluidProps fluid_props(const ScenarioConfig& c) {
    FluidProps f;
    f.density = c.fluid.density;
    f.viscosity = c.fluid.viscosity;
    f.conductivity = c.fluid.conductivity;
    f.specific_heat = c.fluid.specific_heat;
    f.reference_temp = c.inflow.temperature;
    return f;
}

ParticleProps particle_props(const ScenarioConfig& c) {
    ParticleProps p;
    p.density = c.particles.density;
    p.specific_heat = c.particles.specific_heat;
    p.boiling_temp = c.particles.boiling_temp;
    p.latent_heat = c.particles.latent_heat;
    p.min_diameter = c.particles.min_diameter;
    return p;
}

FlowSchemeParams flow_params(const ScenarioConfig& c) {
    FlowSchemeParams f;
    f.rk_stages = c.flow_scheme.rk_stages;
    f.theta = c.flow_scheme.theta;
    f.courant = c.flow_scheme.courant;
    f.dt_cap = c.flow_scheme.dt_cap;
    f.dissipation = c.flow_scheme.dissipation;
    f.pressure_tolerance = c.flow_scheme.pressure_tolerance;
    f.deflation_sectors = c.flow_scheme.deflation_sectors;
    return f;
}

ParticleSchemeParams particle_params(const ScenarioConfig& c) {
    ParticleSchemeParams p;
    p.rk_stages = c.particle_scheme.rk_stages;
    p.limit = c.particle_scheme.limit;
    p.two_way = c.particle_scheme.two_way;
    p.merge_above = c.particle_scheme.merge_above;
    p.split_below = c.particle_scheme.split_below;
    return p;
}

SimplexMesh build_fluid_mesh(const ScenarioConfig& c) {
    return generate_annulus(annulus_spec(c.fluid_mesh, kRotor, kStator));
}

SimplexMesh build_solid_mesh(const ScenarioConfig& c) {
    return generate_annulus(annulus_spec(c.solid_mesh, kInterface, kOuter));
}

GapScenario::GapScenario(const ScenarioConfig& config) : config_(config) {
    validate_config(config_);
    const auto& c = config_;
    fluid_mesh_ = std::make_unique<SimplexMesh>(build_fluid_mesh(c));
    solid_mesh_ = std::make_unique<SimplexMesh>(build_solid_mesh(c));
    const FlowBc bc = flow_bc(c);
    flow_ = std::make_unique<FlowSolver>(*fluid_mesh_, fluid_props(c), bc, flow_params(c));
    flow_state_ = flow_->make_state({0.0, 0.0}, c.inflow.temperature);

    SolidProps sp;
    sp.materials = {SolidMaterial{c.solid.density, c.solid.specific_heat, c.solid.conductivity}};
    heat_ = std::make_unique<HeatSolver>(
        *solid_mesh_, sp, std::map<std::string, double>{},
        HeatSchemeParams{c.heat_scheme.theta, c.heat_scheme.dt, c.heat_scheme.tolerance});
    solid_state_ = heat_->make_state(c.solid.initial_temperature);
    heat_->set_uniform_load(solid_state_, c.solid.volumetric_load);

    if (c.particles.enabled) {
        tracker_ = std::make_unique<ParticleTracker>(*fluid_mesh_, fluid_props(c), particle_props(c), bc,
                                                     particle_params(c));
        // Radial segment across the middle 80% of the gap; parcels move with
        // the inflow speed in the direction of rotation.
        const double phi = c.particles.injection_angle * std::numbers::pi / 180.0;
        const Vec2 er{std::cos(phi), std::sin(phi)};
        const double a = c.fluid_mesh.inner_radius, b = c.fluid_mesh.outer_radius;
        Injection inj;
        inj.start = (a + 0.1 * (b - a)) * er;
        inj.end = (b - 0.1 * (b - a)) * er;
        inj.rate = c.particles.rate;
        inj.diameter = c.particles.diameter;
        inj.temperature = c.inflow.temperature;
        inj.velocity = (c.rpm >= 0.0 ? 1.0 : -1.0) * c.inflow.velocity * perp(er);
        inj.multiplicity = c.particles.multiplicity;
        inj.seed = c.particles.seed;
        tracker_->set_injection(parcels_, inj);
        hook_ = [this](FlowState& s, double dt) { tracker_->step(parcels_, s, dt); };
    }
    if (c.coupling.enabled)
        map_ = std::make_unique<InterfaceMap>(InterfaceMap::build(
            *fluid_mesh_, fluid_mesh_->tag_id(kStator), *solid_mesh_, solid_mesh_->tag_id(kInterface)));
}

double GapScenario::couette_velocity(double r) const {
    const double a = config_.fluid_mesh.inner_radius, b = config_.fluid_mesh.outer_radius;
    return omega(config_) * a * a / (b * b - a * a) * (b * b / r - r);
}

double GapScenario::couette_error() const {
    const double scale = std::abs(omega(config_)) * config_.fluid_mesh.inner_radius;
    double err = 0.0;
    for (std::size_t i = 0; i < fluid_mesh_->num_nodes(); ++i) {
        const Vec2 x = fluid_mesh_->node(i);
        const double r = norm(x);
        const Vec2 exact = couette_velocity(r) / r * perp(x);
        err = std::max(err, norm(flow_state_.velocity[i] - exact));
    }
    return scale > 0.0 ? err / scale : err;
}

ScenarioConfig apply_overrides(ScenarioConfig config, const RunOverrides& o) {
    if (o.output_dir) config.output.directory = o.output_dir->string();
    if (o.outer_iterations) config.coupling.outer_iterations = *o.outer_iterations;
    return config;
}

RunOutcome run_scenario(GapScenario& sc) {
    const auto& c = sc.config();
    const auto started = std::chrono::system_clock::now();
    const auto clock0 = std::chrono::steady_clock::now();
    RunOutcome out;
    out.output_dir = c.output.directory;
    const fs::path dir = out.output_dir;

    std::vector<StepReport>& history = out.flow_history;
    try {
        fs::create_directories(dir);
        auto residuals = open_csv(dir / "fluid_residuals.csv");
        write_residual_header(residuals);
        auto series = open_csv(dir / "solid_series.csv");
        write_heat_series_header(series);

        const auto snapshot = [&](const std::string& suffix) {
            const std::vector<double>& p = sc.flow_state().pressure;
            const std::vector<double>& tf = sc.flow_state().temperature;
            const PointScalar fs_[] = {{"temperature", tf}, {"pressure", p}};
            const PointVector fv[] = {{"velocity", sc.flow_state().velocity}};
            write_vtk(dir / ("fluid_" + suffix + ".vtk"), sc.fluid_mesh(), "fluid " + suffix, fs_, fv);
            const PointScalar ss[] = {{"temperature", sc.solid_state().temperature}};
            write_vtk(dir / ("solid_" + suffix + ".vtk"), sc.solid_mesh(), "solid " + suffix, ss);
        };
        const auto parcels = [&](const std::string& name) {
            auto os = open_csv(dir / name);
            write_parcels_csv(os, sc.parcels());
        };
        const auto after_iteration = [&](std::size_t iter) {
            if (c.output.vtk_every > 0 && iter % c.output.vtk_every == 0) {
                char buf[16];
                std::snprintf(buf, sizeof buf, "iter_%04zu", iter);
                snapshot(buf);
            }
            if (sc.tracker() && c.output.parcels_every > 0 && iter % c.output.parcels_every == 0)
                parcels(numbered("parcels", iter, "csv"));
        };

        const ParticleHook& hook = sc.particle_hook();

        const std::size_t max_steps = std::max<std::size_t>(100000, 2 * c.coupling.fluid_steps);
        if (c.coupling.enabled) {
            FluidAdapterOptions fo;
            fo.trigger = {StepCount{c.coupling.fluid_steps}};
            fo.max_steps = max_steps;
            fo.residual_csv = &residuals;
            FluidAdapter fluid(sc.flow(), sc.flow_state(), sc.fluid_mesh().tag_id(kStator), hook, fo);
            SolidAdapterOptions so;
            so.trigger = {StepCount{c.coupling.solid_steps}};
            so.series_csv = &series;
            SolidAdapter solid(sc.heat(), sc.solid_state(), sc.solid_mesh().tag_id(kInterface), so);
            SessionOptions opts;
            opts.outer_iterations = c.coupling.outer_iterations;
            if (c.coupling.outer_tolerance > 0.0) opts.outer_trigger = StopTrigger{UnknownChange{c.coupling.outer_tolerance}};
            opts.relaxation = c.coupling.relaxation;
            opts.diagnostics_csv = dir / "diagnostics.csv";
            opts.on_iteration = [&](const DiagnosticsRow& row) { after_iteration(row.iter); };
            CouplingSession session(fluid, solid, sc.interface_map(), opts);
            try {
                out.diagnostics = session.run();
            } catch (...) {
                history = fluid.history();
                throw;
            }
            history = fluid.history();
        } else {
            for (std::size_t iter = 1; iter <= c.coupling.outer_iterations; ++iter) {
                auto res = advance_flow_macro_step(sc.flow(), sc.flow_state(), {StepCount{c.coupling.fluid_steps}},
                                                   max_steps, hook, &residuals);
                history.insert(history.end(), res.history.begin(), res.history.end());
                out.diagnostics.fluid_clock.push_back(sc.flow_state().time);
                out.diagnostics.solid_clock.push_back(sc.solid_state().time);
                after_iteration(iter);
            }
            out.couette_error = sc.couette_error();
        }
        snapshot("final");
        if (sc.tracker()) parcels("parcels_final.csv");
    } catch (const std::exception& e) {
        out.status = 1;
        out.error = e.what();
    }

    const double h = sc.fluid_mesh().min_spacing();
    for (const auto& rep : history)
        if (rep.velocity_max > 0.0)
            out.max_divergence_ratio = std::max(out.max_divergence_ratio, rep.divergence_norm * h / rep.velocity_max);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock0).count();
    try {
        fs::create_directories(dir);
        write_text_atomic(dir / "summary.json", summary_json(out));
        out.files.clear();
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().filename() != "manifest.json" &&
                entry.path().extension() != ".tmp")
                out.files.push_back(entry.path());
        std::sort(out.files.begin(), out.files.end());

        nlohmann::ordered_json m;
        m["config_hash"] = "fnv1a64:" + config_hash(c);
        m["started"] = iso_time(started);
        m["finished"] = iso_time(std::chrono::system_clock::now());
        m["wall_seconds"] = wall;
        m["exit_status"] = out.status;
        if (out.status != 0) m["error"] = out.error;
        m["files"] = nlohmann::ordered_json::array();
        for (const auto& f : out.files)
            m["files"].push_back({{"name", f.filename().string()}, {"bytes", fs::file_size(f)}});
        write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
        out.files.push_back(dir / "manifest.json");
    } catch (const std::exception& e) {
        if (out.status == 0) {
            out.status = 1;
            out.error = e.what();
        }
    }
    return out;
}

RunOutcome run_scenario(const ScenarioConfig& config, const RunOverrides& overrides) {
    const ScenarioConfig c = apply_overrides(config, overrides);
    std::unique_ptr<GapScenario> sc;
    try {
        sc = std::make_unique<GapScenario>(c);
    } catch (const std::exception& e) {
        RunOutcome out;
        out.status = 1;
        out.error = e.what();
        out.output_dir = c.output.directory;
        return out;
    }
    return run_scenario(*sc);
}

std::vector<fs::path> write_meshes(const ScenarioConfig& config) {
    const fs::path dir = config.output.directory;
    fs::create_directories(dir);
    const auto fluid = build_fluid_mesh(config);
    const auto solid = build_solid_mesh(config);
    std::vector<fs::path> files{dir / "fluid_mesh.vtk", dir / "solid_mesh.vtk"};
    write_vtk(files[0], fluid, "fluid mesh");
    write_vtk(files[1], solid, "solid mesh");
    return files;
}

std::string summary_json(const RunOutcome& o) {
    nlohmann::ordered_json j;
    j["status"] = o.status == 0 ? "ok" : "failed";
    if (o.status != 0) j["error"] = o.error;
    j["output_dir"] = o.output_dir.string();
    j["outer_iterations"] = o.diagnostics.fluid_clock.size();
    j["outer_trigger_fired"] = o.diagnostics.outer_trigger_fired;
    j["fluid_time"] = o.diagnostics.fluid_clock.empty() ? 0.0 : o.diagnostics.fluid_clock.back();
    j["solid_time"] = o.diagnostics.solid_clock.empty() ? 0.0 : o.diagnostics.solid_clock.back();
    j["max_divergence_ratio"] = o.max_divergence_ratio;
    if (o.couette_error) j["couette_error"] = *o.couette_error;
    if (!o.diagnostics.rows.empty()) {
        const auto& r = o.diagnostics.rows.back();
        j["final"] = {{"iter", r.iter},         {"sum_abs_dT", r.sum_abs_dT}, {"q_cfd", r.q_cfd},
                      {"q_ctd", r.q_ctd},       {"tmin_cfd", r.tmin_cfd},     {"tmax_cfd", r.tmax_cfd},
                      {"tmin_ctd", r.tmin_ctd}, {"tmax_ctd", r.tmax_ctd}};
        j["energy_imbalance"] = r.q_ctd != 0.0 ? std::abs(r.q_cfd - r.q_ctd) / std::abs(r.q_ctd) : 0.0;
    }
    return j.dump(2) + "\n";
}

} // namespace bcm
