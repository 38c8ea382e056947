#include "bcm/heat.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace bcm {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void SolidMaterial::validate() const {
    require(density > 0.0, "solid density must be positive");
    require(specific_heat > 0.0, "solid specific heat must be positive");
    require(conductivity > 0.0, "solid conductivity must be positive");
}

void HeatSchemeParams::validate() const {
    require(theta >= 0.5 && theta <= 1.0, "heat theta must lie in [0.5, 1]");
    require(dt > 0.0, "heat dt must be positive");
    require(tolerance > 0.0 && tolerance < 1.0, "heat tolerance must lie in (0, 1)");
}

HeatSolver::HeatSolver(const SimplexMesh& mesh, SolidProps props, std::map<std::string, double> fixed_temperature,
                       HeatSchemeParams params)
    : mesh_(&mesh), props_(std::move(props)), params_(params) {
    params_.validate();
    require(!props_.materials.empty(), "at least one solid material is required");
    for (const auto& m : props_.materials) m.validate();
    if (props_.element_material.empty()) props_.element_material.assign(mesh.num_elements(), 0);
    require(props_.element_material.size() == mesh.num_elements(), "one material id per element is required");
    for (auto id : props_.element_material) require(id < props_.materials.size(), "material id out of range");

    const std::size_t n = mesh.num_nodes();
    capacity_.assign(n, 0.0);
    std::vector<SparseSpd::Triplet> t;
    t.reserve(9 * mesh.num_elements());
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
        const auto& mat = props_.materials[props_.element_material[e]];
        const auto& el = mesh.element(e);
        const auto& g = mesh.shape_gradients(e);
        const double a = mesh.area(e);
        for (int i = 0; i < 3; ++i) {
            capacity_[el[i]] += mat.density * mat.specific_heat * a / 3.0;
            for (int j = 0; j < 3; ++j) t.push_back({el[i], el[j], mat.conductivity * a * dot(g[i], g[j])});
        }
    }
    stiffness_ = SparseSpd::from_triplets(n, std::move(t));

    fixed_.assign(n, false);
    fixed_value_.assign(n, 0.0);
    for (const auto& [name, value] : fixed_temperature) {
        require(mesh.has_tag(name), "unknown boundary tag '" + name + "'");
        for (auto i : mesh.nodes_with_tag(mesh.tag_id(name))) {
            fixed_[i] = true;
            fixed_value_[i] = value;
        }
    }
    std::vector<bool> keep(n);
    for (std::size_t i = 0; i < n; ++i) {
        keep[i] = !fixed_[i];
        if (keep[i]) free_nodes_.push_back(i);
    }
    free_block_ = stiffness_.restricted(keep);
}

SolidState HeatSolver::make_state(double temperature) const {
    SolidState s;
    s.temperature.assign(mesh_->num_nodes(), temperature);
    for (std::size_t i = 0; i < s.temperature.size(); ++i)
        if (fixed_[i]) s.temperature[i] = fixed_value_[i];
    s.volumetric_load.assign(mesh_->num_elements(), 0.0);
    s.interface_flux.assign(mesh_->boundary_facets().size(), 0.0);
    return s;
}

void HeatSolver::set_interface_flux(SolidState& state, int tag, std::span<const double> flux) const {
    const auto facets = mesh_->facets_with_tag(tag);
    require(flux.size() == facets.size(), "interface flux size does not match the tagged facets");
    for (std::size_t k = 0; k < facets.size(); ++k) state.interface_flux[facets[k]] = flux[k];
}

void HeatSolver::set_uniform_load(SolidState& state, double load) const {
    std::fill(state.volumetric_load.begin(), state.volumetric_load.end(), load);
}

std::vector<double> HeatSolver::load_vector(const SolidState& s) const {
    const auto& m = *mesh_;
    std::vector<double> f(m.num_nodes(), 0.0);
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const double share = s.volumetric_load[e] * m.area(e) / 3.0;
        for (auto a : m.element(e)) f[a] += share;
    }
    for (std::size_t k = 0; k < m.boundary_facets().size(); ++k) {
        if (s.interface_flux[k] == 0.0) continue;
        const auto& bf = m.boundary_facets()[k];
        const double share = 0.5 * s.interface_flux[k] * m.facet_length(bf);
        f[bf.nodes[0]] -= share;
        f[bf.nodes[1]] -= share;
    }
    return f;
}

HeatSystem HeatSolver::assemble(const SolidState& s) const {
    const std::size_t n = mesh_->num_nodes();
    auto f = load_vector(s);
    // dT is the lift T_fixed - T on Dirichlet nodes; the shift by a reference
    // temperature makes K x vanish exactly for uniform fields
    const double ref = n ? s.temperature[0] : 0.0;
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i)
        x[i] = s.temperature[i] - ref + (fixed_[i] ? params_.theta * (fixed_value_[i] - s.temperature[i]) : 0.0);
    const auto kx = stiffness_.multiply(x);
    HeatSystem sys;
    sys.free_nodes = free_nodes_;
    sys.rhs.resize(free_nodes_.size());
    std::vector<double> shift(free_nodes_.size());
    for (std::size_t j = 0; j < free_nodes_.size(); ++j) {
        const std::size_t a = free_nodes_[j];
        sys.rhs[j] = f[a] - kx[a];
        shift[j] = capacity_[a] / params_.dt;
    }
    sys.matrix = free_block_.scaled_plus_diagonal(params_.theta, shift);
    return sys;
}

HeatStepReport HeatSolver::advance(SolidState& s) const {
    HeatStepReport rep;
    if (!free_nodes_.empty()) {
        const auto sys = assemble(s);
        SolverConfig cfg;
        cfg.rel_tolerance = params_.tolerance;
        SolveResult r;
        try {
            r = pcg_solve(sys.matrix, sys.rhs, {}, cfg);
        } catch (const LinearSolverError& e) {
            throw LinearSolverError(std::string("solid heat: ") + e.what(), e.iterations(), e.residual());
        }
        for (std::size_t j = 0; j < sys.free_nodes.size(); ++j) s.temperature[sys.free_nodes[j]] += r.x[j];
        rep.iterations = r.iterations;
        rep.residual = r.final_residual;
    }
    for (std::size_t i = 0; i < s.temperature.size(); ++i)
        if (fixed_[i]) s.temperature[i] = fixed_value_[i];
    s.time += params_.dt;
    ++s.steps;
    return rep;
}

std::vector<double> HeatSolver::surface_temperature(const SolidState& s, int tag) const {
    std::vector<double> out;
    for (auto i : mesh_->nodes_with_tag(tag)) out.push_back(s.temperature[i]);
    return out;
}

double HeatSolver::stored_energy(const SolidState& s) const {
    double e = 0.0;
    for (std::size_t i = 0; i < capacity_.size(); ++i) e += capacity_[i] * s.temperature[i];
    return e;
}

double HeatSolver::generation(const SolidState& s) const {
    double g = 0.0;
    for (std::size_t e = 0; e < mesh_->num_elements(); ++e) g += s.volumetric_load[e] * mesh_->area(e);
    return g;
}

double HeatSolver::interface_outflow(const SolidState& s) const {
    double q = 0.0;
    for (std::size_t k = 0; k < mesh_->boundary_facets().size(); ++k)
        q += s.interface_flux[k] * mesh_->facet_length(mesh_->boundary_facets()[k]);
    return q;
}

void write_heat_series_header(std::ostream& os) { os << "step,time,min_T,max_T,stored_energy\n"; }

void write_heat_series_row(std::ostream& os, const HeatSolver& solver, const SolidState& s) {
    const auto [lo, hi] = std::minmax_element(s.temperature.begin(), s.temperature.end());
    os << s.steps << ',' << fmt(s.time) << ',' << fmt(*lo) << ',' << fmt(*hi) << ',' << fmt(solver.stored_energy(s))
       << '\n';
}

} // namespace bcm
