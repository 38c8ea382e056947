#include "bcm/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace bcm {

namespace {

template <class... F>
struct overloaded : F... {
    using F::operator()...;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

SparseSpd assemble_stiffness(const SimplexMesh& m) {
    std::vector<SparseSpd::Triplet> t;
    t.reserve(9 * m.num_elements());
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& g = m.shape_gradients(e);
        const auto& el = m.element(e);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) t.push_back({el[a], el[b], m.area(e) * dot(g[a], g[b])});
    }
    return SparseSpd::from_triplets(m.num_nodes(), std::move(t));
}

std::size_t edge_index(const std::vector<Edge>& edges, std::size_t i, std::size_t j) {
    const Edge key{std::min(i, j), std::max(i, j)};
    const auto it = std::lower_bound(edges.begin(), edges.end(), key);
    if (it == edges.end() || *it != key) throw std::logic_error("edge not found");
    return static_cast<std::size_t>(it - edges.begin());
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void FluidProps::validate() const {
    require(density > 0.0, "fluid density must be positive");
    require(viscosity > 0.0, "fluid viscosity must be positive");
    require(conductivity > 0.0, "fluid conductivity must be positive");
    require(specific_heat > 0.0, "fluid specific heat must be positive");
}

void FlowSchemeParams::validate() const {
    require(rk_stages >= 1, "rk_stages must be at least 1");
    require(theta >= 0.5 && theta <= 1.0, "theta must lie in [0.5, 1]");
    require(courant > 0.0, "courant number must be positive");
    require(dt_cap > 0.0, "dt cap must be positive");
    require(!fixed_dt || *fixed_dt > 0.0, "fixed dt must be positive");
    require(dissipation >= 0.0, "dissipation must be non-negative");
    require(pressure_tolerance > 0.0 && pressure_tolerance < 1.0, "pressure tolerance must lie in (0, 1)");
    require(implicit_tolerance > 0.0 && implicit_tolerance < 1.0, "implicit tolerance must lie in (0, 1)");
    require(deflation_sectors >= 1 && deflation_bands >= 1, "deflation needs at least one sector and band");
}

void FlowState::reset_sources() {
    std::fill(source_momentum.begin(), source_momentum.end(), Vec2{});
    std::fill(source_energy.begin(), source_energy.end(), 0.0);
}

std::vector<double> rk_coefficients(std::size_t k) {
    std::vector<double> a(k);
    for (std::size_t i = 1; i <= k; ++i) a[i - 1] = 1.0 / static_cast<double>(k + 1 - i);
    return a;
}

double gamma_factor(double re_h) { return std::min(1.0, std::max(0.0, re_h)); }

namespace {

// Explicit diffusion limit rho h^2 / (4 mu): the three-stage predictor is
// stable up to a diffusion number of about 2.8 and lumped P1 reaches 8/h^2.
double viscous_limit(double capacity, double diffusivity, double h) {
    return diffusivity > 0.0 ? capacity * h * h / (4.0 * diffusivity) : std::numeric_limits<double>::infinity();
}

} // namespace

FlowSolver::FlowSolver(const SimplexMesh& mesh, FluidProps props, FlowBc bc, FlowSchemeParams params)
    : mesh_(&mesh), props_(props), bc_(std::move(bc)), params_(params) {
    props_.validate();
    params_.validate();
    for (const auto& [name, cond] : bc_)
        if (!mesh.has_tag(name)) throw std::invalid_argument("boundary condition for unknown tag '" + name + "'");
    for (const auto& tag : mesh.tags())
        if (!mesh.facets_with_tag(tag.id).empty() && !bc_.count(tag.name))
            throw std::invalid_argument("no boundary condition for tag '" + tag.name + "'");

    const std::size_t n = mesh.num_nodes();
    vel_fixed_.assign(n, false);
    temp_fixed_.assign(n, false);
    temp_coupled_.assign(n, false);
    p_solved_.assign(n, true);
    vel_value_.assign(n, Vec2{});
    temp_value_.assign(n, props_.reference_temp);
    coupled_temperature_.assign(n, props_.reference_temp);

    // lower tag ids claim shared corner nodes first
    std::vector<std::size_t> order(mesh.boundary_facets().size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return mesh.boundary_facets()[a].tag < mesh.boundary_facets()[b].tag;
    });
    for (std::size_t fi : order) {
        const auto& f = mesh.boundary_facets()[fi];
        const auto& cond = bc_.at(mesh.tag_name(f.tag));
        for (std::size_t node : f.nodes) {
            const Vec2& x = mesh.node(node);
            std::visit(overloaded{
                           [&](const InflowBc& c) {
                               if (!vel_fixed_[node]) vel_value_[node] = c.velocity;
                               vel_fixed_[node] = true;
                               if (!temp_fixed_[node]) temp_value_[node] = c.temperature;
                               temp_fixed_[node] = true;
                           },
                           [&](const WallBc& c) {
                               if (!vel_fixed_[node]) vel_value_[node] = c.velocity_at(x);
                               vel_fixed_[node] = true;
                               if (c.thermal == WallThermal::fixed) {
                                   if (!temp_fixed_[node]) temp_value_[node] = c.temperature;
                                   temp_fixed_[node] = true;
                               } else if (c.thermal == WallThermal::coupled) {
                                   temp_coupled_[node] = true;
                               }
                           },
                           [&](const OutflowBc&) { p_solved_[node] = false; },
                       },
                       cond);
        }
    }
    // a prescribed value wins over a coupled one at shared nodes
    for (std::size_t i = 0; i < n; ++i) {
        if (temp_fixed_[i]) temp_coupled_[i] = false;
        if (temp_coupled_[i]) temp_fixed_[i] = true;
    }
    const bool has_outflow = std::find(p_solved_.begin(), p_solved_.end(), false) != p_solved_.end();

    // edge coefficients C_ij = sum_e A/3 (grad N_j - grad N_i) / 2 for i < j
    edge_coeff_.assign(mesh.edges().size(), Vec2{});
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
        const auto& el = mesh.element(e);
        const auto& g = mesh.shape_gradients(e);
        const double w = mesh.area(e) / 3.0;
        for (int a = 0; a < 3; ++a) {
            const int b = (a + 1) % 3;
            const std::size_t i = el[a], j = el[b];
            const Vec2 c = 0.5 * w * (g[b] - g[a]);
            edge_coeff_[edge_index(mesh.edges(), i, j)] += i < j ? c : -c;
        }
    }

    stiffness_ = assemble_stiffness(mesh);
    std::vector<bool> vel_free(n), temp_free(n);
    for (std::size_t i = 0; i < n; ++i) {
        vel_free[i] = !vel_fixed_[i];
        temp_free[i] = !temp_fixed_[i];
    }
    vel_block_ = stiffness_.restricted(vel_free);
    temp_block_ = stiffness_.restricted(temp_free);
    vel_free_index_.assign(n, kNoGroup);
    temp_free_index_.assign(n, kNoGroup);
    for (std::size_t i = 0; i < n; ++i) {
        if (vel_free[i]) {
            vel_free_index_[i] = vel_free_nodes_.size();
            vel_free_nodes_.push_back(i);
        }
        if (temp_free[i]) {
            temp_free_index_[i] = temp_free_nodes_.size();
            temp_free_nodes_.push_back(i);
        }
    }

    if (params_.pressure_operator == PressureOperator::exact) {
        // L = D_F M^-1 D_F^T. Column a of D holds D_{j,a} = sum_{e ∋ a, j} A/3 grad N_a.
        const auto& lumped = mesh.lumped_area();
        std::vector<std::vector<std::pair<std::size_t, Vec2>>> columns(n);
        for (std::size_t a : vel_free_nodes_) {
            auto& col = columns[a];
            for (std::size_t e : mesh.node_elements()[a]) {
                const auto& el = mesh.element(e);
                int la = 0;
                while (el[la] != a) ++la;
                const Vec2 c = (mesh.area(e) / 3.0) * mesh.shape_gradients(e)[la];
                for (std::size_t j : el) {
                    auto it = std::find_if(col.begin(), col.end(), [j](const auto& p) { return p.first == j; });
                    if (it == col.end()) col.push_back({j, c});
                    else it->second += c;
                }
            }
        }
        std::vector<double> diag(n, 0.0);
        double diag_max = 0.0;
        for (std::size_t a : vel_free_nodes_)
            for (const auto& [j, c] : columns[a]) diag[j] += norm2(c) / lumped[a];
        for (double d : diag) diag_max = std::max(diag_max, d);
        for (std::size_t j = 0; j < n; ++j)
            if (diag[j] <= 1e-14 * diag_max) p_solved_[j] = false; // decoupled from every free velocity
        p_index_.assign(n, kNoGroup);
        for (std::size_t j = 0; j < n; ++j)
            if (p_solved_[j]) {
                p_index_[j] = p_nodes_.size();
                p_nodes_.push_back(j);
            }
        std::vector<SparseSpd::Triplet> t;
        for (std::size_t a : vel_free_nodes_) {
            for (const auto& [i, ci] : columns[a]) {
                if (!p_solved_[i]) continue;
                for (const auto& [j, cj] : columns[a]) {
                    if (!p_solved_[j]) continue;
                    t.push_back({p_index_[i], p_index_[j], dot(ci, cj) / lumped[a]});
                }
            }
        }
        pressure_matrix_ = SparseSpd::from_triplets(p_nodes_.size(), std::move(t));
    } else {
        // L = K; the step then enforces the stabilised divergence
        // D v - (dt/rho)(K - D_F M^-1 D_F^T) dp = 0
        p_index_.assign(n, kNoGroup);
        for (std::size_t j = 0; j < n; ++j)
            if (p_solved_[j]) {
                p_index_[j] = p_nodes_.size();
                p_nodes_.push_back(j);
            }
        pressure_matrix_ = stiffness_.restricted(p_solved_);
    }
    pressure_nullspace_ = !has_outflow;

    if (params_.pressure_preconditioner == Preconditioner::deflated_jacobi && !p_nodes_.empty()) {
        // angular sectors x radial bands about the bounding-box centre
        Vec2 lo{1e300, 1e300}, hi{-1e300, -1e300};
        for (const auto& p : mesh.nodes()) {
            lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
            hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
        }
        const Vec2 c = 0.5 * (lo + hi);
        double rmin = 1e300, rmax = 0.0;
        for (std::size_t j : p_nodes_) {
            rmin = std::min(rmin, norm(mesh.node(j) - c));
            rmax = std::max(rmax, norm(mesh.node(j) - c));
        }
        const std::size_t ns = params_.deflation_sectors, nb = params_.deflation_bands;
        std::vector<std::size_t> raw(p_nodes_.size());
        for (std::size_t k = 0; k < p_nodes_.size(); ++k) {
            const Vec2 d = mesh.node(p_nodes_[k]) - c;
            const double th = std::atan2(d.y, d.x) + std::numbers::pi;
            // nodes on a sector boundary go to the upper sector whatever the round-off
            const auto s = std::min(ns - 1, static_cast<std::size_t>(th / (2.0 * std::numbers::pi) * ns + 1e-9));
            const double rr = rmax > rmin ? (norm(d) - rmin) / (rmax - rmin) : 0.0;
            const auto b = std::min(nb - 1, static_cast<std::size_t>(rr * nb + 1e-9));
            raw[k] = s * nb + b;
        }
        std::vector<std::size_t> remap(ns * nb, kNoGroup);
        std::size_t used = 0;
        for (auto& g : raw) {
            if (remap[g] == kNoGroup) remap[g] = used++;
            g = remap[g];
        }
        if (used >= 2) deflation_ = build_deflation(pressure_matrix_, std::move(raw), pressure_nullspace_);
    }
}

FlowState FlowSolver::make_state(const Vec2& velocity, double temperature) const {
    const std::size_t n = mesh_->num_nodes();
    FlowState s;
    s.velocity.assign(n, velocity);
    s.pressure.assign(n, 0.0);
    s.temperature.assign(n, temperature);
    s.source_momentum.assign(n, Vec2{});
    s.source_energy.assign(n, 0.0);
    apply_boundary_conditions(s);
    return s;
}

void FlowSolver::apply_boundary_conditions(FlowState& s) const {
    for (std::size_t i = 0; i < mesh_->num_nodes(); ++i) {
        if (vel_fixed_[i]) s.velocity[i] = vel_value_[i];
        if (temp_fixed_[i]) s.temperature[i] = boundary_temperature(i);
    }
}

void FlowSolver::set_coupled_temperature(std::span<const double> nodal) {
    if (nodal.size() != mesh_->num_nodes()) throw std::invalid_argument("coupled temperature has wrong size");
    coupled_temperature_.assign(nodal.begin(), nodal.end());
}

double FlowSolver::boundary_temperature(std::size_t node) const {
    return temp_coupled_[node] ? coupled_temperature_[node] : temp_value_[node];
}

double FlowSolver::compute_timestep(const FlowState& s) const {
    if (params_.fixed_dt) return *params_.fixed_dt;
    const auto& h = mesh_->node_spacing();
    double dt = params_.dt_cap;
    for (std::size_t i = 0; i < mesh_->num_nodes(); ++i)
        dt = std::min(dt, params_.courant * h[i] / std::max(norm(s.velocity[i]), 1e-30));
    return dt;
}

void FlowSolver::add_dissipation(const std::vector<Vec2>& adv, std::span<const double> u, std::size_t stride,
                                 double scale, std::span<double> out) const {
    if (params_.dissipation_kind == EdgeDissipation::none || params_.dissipation == 0.0) return;
    const auto& m = *mesh_;
    const std::size_t n = m.num_nodes();
    std::vector<Vec2> grad;
    if (params_.dissipation_kind == EdgeDissipation::gradient_corrected) {
        grad.assign(n * stride, Vec2{});
        for (std::size_t e = 0; e < m.num_elements(); ++e) {
            const auto& el = m.element(e);
            const auto& g = m.shape_gradients(e);
            const double w = m.area(e) / 3.0;
            for (std::size_t c = 0; c < stride; ++c) {
                Vec2 ge{};
                for (int b = 0; b < 3; ++b) ge += u[el[b] * stride + c] * g[b];
                for (std::size_t a : el) grad[a * stride + c] += w * ge;
            }
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < stride; ++c) grad[i * stride + c] = grad[i * stride + c] / m.lumped_area()[i];
    }
    const auto& edges = m.edges();
    for (std::size_t k = 0; k < edges.size(); ++k) {
        const std::size_t i = edges[k][0], j = edges[k][1];
        const double s = params_.dissipation * scale * std::abs(dot(0.5 * (adv[i] + adv[j]), edge_coeff_[k]));
        if (s == 0.0) continue;
        const Vec2 dx = m.node(j) - m.node(i);
        for (std::size_t c = 0; c < stride; ++c) {
            double d = u[j * stride + c] - u[i * stride + c];
            if (!grad.empty()) d -= 0.5 * dot(grad[i * stride + c] + grad[j * stride + c], dx);
            out[i * stride + c] += s * d;
            out[j * stride + c] -= s * d;
        }
    }
}

std::vector<Vec2> FlowSolver::momentum_rhs(const FlowState& s, const std::vector<Vec2>& u) const {
    const auto& m = *mesh_;
    const std::size_t n = m.num_nodes();
    const double rho = props_.density, mu = props_.viscosity;
    std::vector<Vec2> r(n, Vec2{});
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& el = m.element(e);
        const auto& g = m.shape_gradients(e);
        const double area = m.area(e);
        const Vec2 vbar = (u[el[0]] + u[el[1]] + u[el[2]]) / 3.0;
        Vec2 gu_x{}, gu_y{}; // gradients of the two components
        double pbar = 0.0;
        for (int b = 0; b < 3; ++b) {
            gu_x += u[el[b]].x * g[b];
            gu_y += u[el[b]].y * g[b];
            pbar += s.pressure[el[b]] / 3.0;
        }
        const Vec2 adv{dot(vbar, gu_x), dot(vbar, gu_y)};
        for (int a = 0; a < 3; ++a) {
            // -rho v.grad v, -mu grad N_a . grad v, + p div N_a
            r[el[a]] += (-rho * area / 3.0) * adv;
            r[el[a]] -= mu * area * Vec2{dot(g[a], gu_x), dot(g[a], gu_y)};
            r[el[a]] += (pbar * area) * g[a];
        }
    }
    std::span<double> flat(reinterpret_cast<double*>(r.data()), 2 * n);
    std::span<const double> uf(reinterpret_cast<const double*>(u.data()), 2 * n);
    add_dissipation(u, uf, 2, rho, flat);
    const auto& lumped = m.lumped_area();
    for (std::size_t i = 0; i < n; ++i) {
        const double buoy = 1.0 + props_.expansion * (s.temperature[i] - props_.reference_temp);
        r[i] += (lumped[i] * rho * buoy) * props_.gravity;
        r[i] += s.source_momentum[i];
    }
    return r;
}

std::vector<double> FlowSolver::energy_rhs(const FlowState& s, const std::vector<double>& t) const {
    const auto& m = *mesh_;
    const std::size_t n = m.num_nodes();
    const double rc = props_.density * props_.specific_heat, k = props_.conductivity;
    std::vector<double> r(n, 0.0);
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& el = m.element(e);
        const auto& g = m.shape_gradients(e);
        const double area = m.area(e);
        const Vec2 vbar = (s.velocity[el[0]] + s.velocity[el[1]] + s.velocity[el[2]]) / 3.0;
        Vec2 gt{};
        for (int b = 0; b < 3; ++b) gt += t[el[b]] * g[b];
        const double adv = dot(vbar, gt);
        for (int a = 0; a < 3; ++a) r[el[a]] += -rc * area / 3.0 * adv - k * area * dot(g[a], gt);
    }
    add_dissipation(s.velocity, t, 1, rc, r);
    for (std::size_t i = 0; i < n; ++i) r[i] += s.source_energy[i];
    return r;
}

std::vector<Vec2> FlowSolver::prediction(const FlowState& s, double dt) const {
    const auto& m = *mesh_;
    const std::size_t n = m.num_nodes();
    const double rho = props_.density, mu = props_.viscosity;
    const auto& lumped = m.lumped_area();
    const auto& h = m.node_spacing();
    const auto alpha = rk_coefficients(params_.rk_stages);

    std::vector<double> gamma(n);
    for (std::size_t i = 0; i < n; ++i) gamma[i] = gamma_factor(viscous_limit(rho, mu, h[i]) / dt);

    std::vector<Vec2> u = s.velocity;
    for (std::size_t i = 0; i + 1 < params_.rk_stages; ++i) {
        const auto r = momentum_rhs(s, u);
        for (std::size_t a = 0; a < n; ++a)
            u[a] = vel_fixed_[a] ? vel_value_[a]
                                 : s.velocity[a] + (alpha[i] * gamma[a] * dt / (rho * lumped[a])) * r[a];
    }

    // [rho M/dt + theta mu K] (v* - v^n) = r(v^{k-1}), Dirichlet rows eliminated
    auto r = momentum_rhs(s, u);
    std::vector<Vec2> v_star(n);
    std::vector<double> lift_x(n, 0.0), lift_y(n, 0.0);
    bool lifted = false;
    for (std::size_t a = 0; a < n; ++a) {
        if (!vel_fixed_[a]) continue;
        v_star[a] = vel_value_[a];
        const Vec2 d = vel_value_[a] - s.velocity[a];
        lift_x[a] = d.x;
        lift_y[a] = d.y;
        lifted = lifted || d.x != 0.0 || d.y != 0.0;
    }
    const std::size_t nf = vel_free_nodes_.size();
    if (nf == 0) return v_star;
    std::vector<double> kx, ky;
    if (lifted) {
        kx = stiffness_.multiply(lift_x);
        ky = stiffness_.multiply(lift_y);
    }
    std::vector<double> shift(nf), bx(nf), by(nf);
    for (std::size_t k = 0; k < nf; ++k) {
        const std::size_t a = vel_free_nodes_[k];
        shift[k] = rho * lumped[a] / dt;
        bx[k] = r[a].x - (lifted ? params_.theta * mu * kx[a] : 0.0);
        by[k] = r[a].y - (lifted ? params_.theta * mu * ky[a] : 0.0);
    }
    const auto mat = vel_block_.scaled_plus_diagonal(params_.theta * mu, shift);
    SolverConfig cfg;
    cfg.rel_tolerance = params_.implicit_tolerance;
    SolveResult sx, sy;
    try {
        sx = pcg_solve(mat, bx, {}, cfg);
        sy = pcg_solve(mat, by, {}, cfg);
    } catch (const LinearSolverError& e) {
        throw LinearSolverError(std::string("implicit viscous stage: ") + e.what(), e.iterations(), e.residual());
    }
    for (std::size_t k = 0; k < nf; ++k) {
        const std::size_t a = vel_free_nodes_[k];
        v_star[a] = s.velocity[a] + Vec2{sx.x[k], sy.x[k]};
    }
    return v_star;
}

std::vector<double> FlowSolver::pressure_rhs(const std::vector<Vec2>& v_star, double dt) const {
    const auto& m = *mesh_;
    std::vector<double> dv(m.num_nodes(), 0.0);
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& el = m.element(e);
        const auto& g = m.shape_gradients(e);
        double div = 0.0;
        for (int b = 0; b < 3; ++b) div += dot(v_star[el[b]], g[b]);
        for (std::size_t a : el) dv[a] += m.area(e) / 3.0 * div;
    }
    std::vector<double> rhs(p_nodes_.size());
    for (std::size_t k = 0; k < p_nodes_.size(); ++k) rhs[k] = -(props_.density / dt) * dv[p_nodes_[k]];
    return rhs;
}

PressureResult FlowSolver::pressure_correction(const std::vector<Vec2>& v_star, double dt) const {
    PressureResult out;
    out.increment.assign(mesh_->num_nodes(), 0.0);
    if (p_nodes_.empty()) return out;
    const auto rhs = pressure_rhs(v_star, dt);
    SolverConfig cfg;
    cfg.rel_tolerance = params_.pressure_tolerance;
    cfg.constant_nullspace = pressure_nullspace_;
    const bool deflate = deflation_.num_groups() > 0;
    cfg.preconditioner = deflate ? Preconditioner::deflated_jacobi : Preconditioner::jacobi;
    SolveResult r;
    try {
        r = pcg_solve(pressure_matrix_, rhs, {}, cfg, deflate ? &deflation_ : nullptr);
    } catch (const LinearSolverError& e) {
        throw LinearSolverError(std::string("pressure correction: ") + e.what(), e.iterations(), e.residual());
    }
    for (std::size_t k = 0; k < p_nodes_.size(); ++k) out.increment[p_nodes_[k]] = r.x[k];
    out.iterations = r.iterations;
    out.residual = r.final_residual;
    return out;
}

std::vector<Vec2> FlowSolver::velocity_correction(const std::vector<Vec2>& v_star,
                                                  const std::vector<double>& increment, double dt) const {
    const auto& m = *mesh_;
    std::vector<Vec2> force(m.num_nodes(), Vec2{});
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& el = m.element(e);
        const auto& g = m.shape_gradients(e);
        const double pbar = (increment[el[0]] + increment[el[1]] + increment[el[2]]) / 3.0;
        for (int a = 0; a < 3; ++a) force[el[a]] += (pbar * m.area(e)) * g[a];
    }
    std::vector<Vec2> v = v_star;
    const double c = dt / props_.density;
    for (std::size_t a : vel_free_nodes_) v[a] += (c / m.lumped_area()[a]) * force[a];
    return v;
}

std::vector<double> FlowSolver::advance_temperature(const FlowState& s, double dt) const {
    const auto& m = *mesh_;
    const std::size_t n = m.num_nodes();
    const double rc = props_.density * props_.specific_heat, k = props_.conductivity;
    const auto& lumped = m.lumped_area();
    const auto& h = m.node_spacing();
    const auto alpha = rk_coefficients(params_.rk_stages);

    std::vector<double> gamma(n);
    for (std::size_t i = 0; i < n; ++i) gamma[i] = gamma_factor(viscous_limit(rc, k, h[i]) / dt);

    std::vector<double> t = s.temperature;
    for (std::size_t i = 0; i + 1 < params_.rk_stages; ++i) {
        const auto r = energy_rhs(s, t);
        for (std::size_t a = 0; a < n; ++a)
            t[a] = temp_fixed_[a] ? boundary_temperature(a)
                                  : s.temperature[a] + alpha[i] * gamma[a] * dt * r[a] / (rc * lumped[a]);
    }
    const auto r = energy_rhs(s, t);
    std::vector<double> out(n);
    std::vector<double> lift(n, 0.0);
    bool lifted = false;
    for (std::size_t a = 0; a < n; ++a) {
        if (!temp_fixed_[a]) continue;
        out[a] = boundary_temperature(a);
        lift[a] = out[a] - s.temperature[a];
        lifted = lifted || lift[a] != 0.0;
    }
    const std::size_t nf = temp_free_nodes_.size();
    if (nf == 0) return out;
    std::vector<double> kl;
    if (lifted) kl = stiffness_.multiply(lift);
    std::vector<double> shift(nf), b(nf);
    for (std::size_t j = 0; j < nf; ++j) {
        const std::size_t a = temp_free_nodes_[j];
        shift[j] = rc * lumped[a] / dt;
        b[j] = r[a] - (lifted ? params_.theta * k * kl[a] : 0.0);
    }
    const auto mat = temp_block_.scaled_plus_diagonal(params_.theta * k, shift);
    SolverConfig cfg;
    cfg.rel_tolerance = params_.implicit_tolerance;
    SolveResult sol;
    try {
        sol = pcg_solve(mat, b, {}, cfg);
    } catch (const LinearSolverError& e) {
        throw LinearSolverError(std::string("fluid temperature: ") + e.what(), e.iterations(), e.residual());
    }
    for (std::size_t j = 0; j < nf; ++j) out[temp_free_nodes_[j]] = s.temperature[temp_free_nodes_[j]] + sol.x[j];
    return out;
}

StepReport FlowSolver::step(FlowState& s, double dt) const {
    StepReport rep;
    rep.dt = dt;
    const auto v_old = s.velocity;
    const auto t_old = s.temperature;
    const auto v_star = prediction(s, dt);
    const auto pr = pressure_correction(v_star, dt);
    s.velocity = velocity_correction(v_star, pr.increment, dt);
    for (std::size_t i = 0; i < s.pressure.size(); ++i) s.pressure[i] += pr.increment[i];
    s.temperature = advance_temperature(s, dt);
    s.time += dt;
    ++s.steps;

    double sum = 0.0;
    for (std::size_t a : vel_free_nodes_) {
        const double d = norm(s.velocity[a] - v_old[a]);
        sum += d * d;
        rep.velocity_change = std::max(rep.velocity_change, d);
    }
    for (std::size_t a = 0; a < s.temperature.size(); ++a)
        rep.temperature_change = std::max(rep.temperature_change, std::abs(s.temperature[a] - t_old[a]));
    rep.momentum_residual = vel_free_nodes_.empty() ? 0.0 : std::sqrt(sum / vel_free_nodes_.size()) / dt;
    rep.galerkin_divergence = divergence_norm(s.velocity);
    rep.divergence_norm = params_.pressure_operator == PressureOperator::exact
                              ? rep.galerkin_divergence
                              : projection_residual(v_star, pr.increment, dt);
    for (const auto& v : s.velocity) rep.velocity_max = std::max(rep.velocity_max, norm(v));
    rep.pressure_iterations = pr.iterations;
    rep.pressure_residual = pr.residual;
    rep.step = s.steps;
    rep.time = s.time;
    return rep;
}

std::vector<double> FlowSolver::nodal_divergence(const std::vector<Vec2>& v) const {
    const auto& m = *mesh_;
    std::vector<double> d(m.num_nodes(), 0.0);
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
        const auto& el = m.element(e);
        const auto& g = m.shape_gradients(e);
        double div = 0.0;
        for (int b = 0; b < 3; ++b) div += dot(v[el[b]], g[b]);
        for (std::size_t a : el) d[a] += m.area(e) / 3.0 * div;
    }
    for (std::size_t i = 0; i < d.size(); ++i) d[i] /= m.lumped_area()[i];
    return d;
}

double FlowSolver::projection_residual(const std::vector<Vec2>& v_star, const std::vector<double>& increment,
                                       double dt) const {
    const auto d = nodal_divergence(v_star);
    const auto kp = stiffness_.multiply(increment);
    const auto& lumped = mesh_->lumped_area();
    const double c = dt / props_.density;
    double worst = 0.0;
    for (std::size_t j : p_nodes_) worst = std::max(worst, std::abs(d[j] + c * kp[j] / lumped[j]));
    return worst;
}

double FlowSolver::divergence_norm(const std::vector<Vec2>& v) const {
    const auto d = nodal_divergence(v);
    double worst = 0.0;
    for (std::size_t j : p_nodes_) worst = std::max(worst, std::abs(d[j]));
    return worst;
}

std::vector<double> FlowSolver::wall_heat_flux(const FlowState& s, int tag) const {
    const auto& m = *mesh_;
    std::vector<double> q;
    for (std::size_t fi : m.facets_with_tag(tag)) {
        const auto& f = m.boundary_facets()[fi];
        const auto& el = m.element(f.element);
        const auto& g = m.shape_gradients(f.element);
        Vec2 gt{};
        for (int b = 0; b < 3; ++b) gt += s.temperature[el[b]] * g[b];
        q.push_back(props_.conductivity * dot(gt, m.facet_outward_normal(f)));
    }
    return q;
}

void write_residual_header(std::ostream& os) { os << "step,time,dt,momentum_residual,divergence_norm\n"; }

MacroStepResult advance_flow_macro_step(const FlowSolver& solver, FlowState& state, const StopTrigger& trigger,
                                        std::size_t max_steps,
                                        const std::function<void(FlowState&, double)>& before_step,
                                        std::ostream* residual_csv) {
    trigger.validate();
    MacroStepResult out;
    ProgressRecord progress;
    const double rho = solver.props().density;
    while (out.steps < max_steps) {
        const double dt = solver.compute_timestep(state);
        state.reset_sources();
        if (before_step) before_step(state, dt);
        const auto rep = solver.step(state, dt);
        out.history.push_back(rep);
        ++out.steps;
        out.elapsed += dt;

        progress.elapsed_time = out.elapsed;
        progress.steps = out.steps;
        progress.residuals.push_back(rep.momentum_residual);
        progress.unknown_change = std::max(rep.velocity_change, rep.temperature_change);
        double ke = 0.0;
        for (std::size_t i = 0; i < state.velocity.size(); ++i)
            ke += 0.5 * rho * solver.mesh().lumped_area()[i] * norm2(state.velocity[i]);
        progress.monitor.push_back(ke);
        if (residual_csv)
            *residual_csv << rep.step << ',' << fmt(rep.time) << ',' << fmt(rep.dt) << ','
                          << fmt(rep.momentum_residual) << ',' << fmt(rep.divergence_norm) << '\n';
        if (check_trigger(trigger, progress)) {
            out.trigger_fired = true;
            break;
        }
    }
    return out;
}

} // namespace bcm
