#include "bcm/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace bcm {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Chain {
    std::vector<std::size_t> nodes;                   // sorted global ids
    std::vector<std::array<std::size_t, 2>> facets;   // local node indices
    std::vector<double> lengths;
    std::vector<Vec2> points;                         // per local node
};

Chain make_chain(const SimplexMesh& m, int tag, const char* side) {
    Chain c;
    c.nodes = m.nodes_with_tag(tag);
    if (c.nodes.empty()) throw MeshError(std::string(side) + " interface has no facets");
    auto local = [&](std::size_t g) {
        return static_cast<std::size_t>(std::lower_bound(c.nodes.begin(), c.nodes.end(), g) - c.nodes.begin());
    };
    for (std::size_t fi : m.facets_with_tag(tag)) {
        const auto& f = m.boundary_facets()[fi];
        c.facets.push_back({local(f.nodes[0]), local(f.nodes[1])});
        c.lengths.push_back(m.facet_length(f));
    }
    for (std::size_t g : c.nodes) c.points.push_back(m.node(g));
    return c;
}

/// Largest l * turn / 8 over chain nodes joining two facets.
double sagitta(const Chain& c) {
    std::vector<std::vector<std::size_t>> incident(c.nodes.size());
    for (std::size_t k = 0; k < c.facets.size(); ++k)
        for (std::size_t a : c.facets[k]) incident[a].push_back(k);
    double worst = 0.0;
    for (const auto& inc : incident) {
        if (inc.size() != 2) continue;
        const auto& f0 = c.facets[inc[0]];
        const auto& f1 = c.facets[inc[1]];
        const Vec2 t0 = c.points[f0[1]] - c.points[f0[0]];
        const Vec2 t1 = c.points[f1[1]] - c.points[f1[0]];
        const double turn = std::abs(std::atan2(cross(t0, t1), dot(t0, t1)));
        const double l = std::max(c.lengths[inc[0]], c.lengths[inc[1]]);
        worst = std::max(worst, l * std::min(turn, std::numbers::pi - turn) / 8.0);
    }
    return worst;
}

ChainSample project(const Chain& c, const Vec2& x) {
    ChainSample best;
    best.distance = std::numeric_limits<double>::infinity();
    for (const auto& f : c.facets) {
        const Vec2 p0 = c.points[f[0]], d = c.points[f[1]] - p0;
        const double t = std::clamp(dot(x - p0, d) / norm2(d), 0.0, 1.0);
        const double dist = norm(x - (p0 + t * d));
        if (dist < best.distance) best = {f[0], f[1], 1.0 - t, t, dist};
    }
    return best;
}

} // namespace

InterfaceMap InterfaceMap::build(const SimplexMesh& fluid, int fluid_tag, const SimplexMesh& solid, int solid_tag,
                                 double tolerance) {
    const Chain cf = make_chain(fluid, fluid_tag, "fluid");
    const Chain cs = make_chain(solid, solid_tag, "solid");
    InterfaceMap map;
    map.fluid_nodes_ = cf.nodes;
    map.solid_nodes_ = cs.nodes;
    map.fluid_facet_nodes_ = cf.facets;
    map.fluid_lengths_ = cf.lengths;
    map.solid_lengths_ = cs.lengths;

    for (const auto& x : cf.points) map.to_fluid_.push_back(project(cs, x));
    for (const auto& f : cs.facets) map.to_solid_.push_back(project(cf, 0.5 * (cs.points[f[0]] + cs.points[f[1]])));

    double dev = 0.0;
    for (const auto& s : map.to_fluid_) dev = std::max(dev, s.distance);
    for (const auto& s : map.to_solid_) dev = std::max(dev, s.distance);
    for (const auto& x : cs.points) dev = std::max(dev, project(cf, x).distance);
    map.max_deviation_ = dev;
    const double limit = tolerance + sagitta(cf) + sagitta(cs);
    if (dev > limit) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "interface chains deviate by %.6g cm (tolerance %.6g cm)", dev, limit);
        throw MeshError(buf);
    }
    return map;
}

std::vector<double> interpolate_samples(std::span<const ChainSample> samples, std::span<const double> source) {
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.wa * source[s.a] + s.wb * source[s.b]);
    return out;
}

void conserve_integral(std::vector<double>& target, std::span<const double> lengths, double integral) {
    double current = 0.0, magnitude = 0.0, total = 0.0;
    for (std::size_t k = 0; k < target.size(); ++k) {
        current += target[k] * lengths[k];
        magnitude += std::abs(target[k]) * lengths[k];
        total += lengths[k];
    }
    if (magnitude > 0.0 && std::abs(current) >= 0.1 * magnitude) {
        const double scale = integral / current;
        for (double& t : target) t *= scale;
    } else if (total > 0.0) {
        const double shift = (integral - current) / total;
        for (double& t : target) t += shift;
    }
}

std::vector<double> InterfaceMap::temperature_to_fluid(std::span<const double> solid_nodal) const {
    if (solid_nodal.size() != solid_nodes_.size())
        throw std::invalid_argument("solid interface temperature size does not match the map");
    return interpolate_samples(to_fluid_, solid_nodal);
}

std::vector<double> InterfaceMap::flux_to_solid(std::span<const double> fluid_facet_flux) const {
    if (fluid_facet_flux.size() != fluid_lengths_.size())
        throw std::invalid_argument("fluid interface flux size does not match the map");
    std::vector<double> sum(fluid_nodes_.size(), 0.0), weight(fluid_nodes_.size(), 0.0);
    double integral = 0.0;
    for (std::size_t k = 0; k < fluid_facet_nodes_.size(); ++k) {
        const double ql = fluid_facet_flux[k] * fluid_lengths_[k];
        integral += ql;
        for (std::size_t a : fluid_facet_nodes_[k]) {
            sum[a] += ql;
            weight[a] += fluid_lengths_[k];
        }
    }
    for (std::size_t a = 0; a < sum.size(); ++a) sum[a] = weight[a] > 0.0 ? sum[a] / weight[a] : 0.0;
    auto out = interpolate_samples(to_solid_, sum);
    conserve_integral(out, solid_lengths_, integral);
    return out;
}

FluidAdapter::FluidAdapter(FlowSolver& solver, FlowState& state, int interface_tag, ParticleHook particles,
                           FluidAdapterOptions options)
    : solver_(&solver), state_(&state), tag_(interface_tag), nodes_(solver.mesh().nodes_with_tag(interface_tag)),
      particles_(std::move(particles)), options_(std::move(options)) {
    options_.trigger.validate();
}

void FluidAdapter::import_interface(std::span<const double> values) {
    if (values.size() != nodes_.size()) throw std::invalid_argument("fluid import size does not match the interface");
    std::vector<double> nodal = solver_->coupled_temperature();
    nodal.resize(solver_->mesh().num_nodes(), 0.0);
    for (std::size_t k = 0; k < nodes_.size(); ++k) nodal[nodes_[k]] = values[k];
    solver_->set_coupled_temperature(nodal);
    solver_->apply_boundary_conditions(*state_);
}

AdvanceSummary FluidAdapter::advance() {
    const auto r = advance_flow_macro_step(*solver_, *state_, options_.trigger, options_.max_steps, particles_,
                                           options_.residual_csv);
    history_.insert(history_.end(), r.history.begin(), r.history.end());
    return {r.steps, r.elapsed, r.trigger_fired};
}

InterfaceData FluidAdapter::export_interface() const {
    InterfaceData d;
    d.values = solver_->wall_heat_flux(*state_, tag_);
    const auto& m = solver_->mesh();
    const auto facets = m.facets_with_tag(tag_);
    for (std::size_t k = 0; k < facets.size(); ++k) d.heat_load += d.values[k] * m.facet_length(m.boundary_facets()[facets[k]]);
    d.t_min = std::numeric_limits<double>::infinity();
    d.t_max = -d.t_min;
    for (std::size_t i : nodes_) {
        d.t_min = std::min(d.t_min, state_->temperature[i]);
        d.t_max = std::max(d.t_max, state_->temperature[i]);
    }
    return d;
}

SolidAdapter::SolidAdapter(const HeatSolver& solver, SolidState& state, int interface_tag, SolidAdapterOptions options)
    : solver_(&solver), state_(&state), tag_(interface_tag), options_(std::move(options)),
      heat_load_(solver.interface_outflow(state)) {
    options_.trigger.validate();
}

void SolidAdapter::import_interface(std::span<const double> values) {
    solver_->set_interface_flux(*state_, tag_, values);
}

AdvanceSummary SolidAdapter::advance() {
    AdvanceSummary out;
    ProgressRecord progress;
    const double e0 = solver_->stored_energy(*state_);
    const double generation = solver_->generation(*state_);
    while (out.steps < options_.max_steps) {
        const auto before = state_->temperature;
        const double e_prev = solver_->stored_energy(*state_);
        const double t_prev = state_->time;
        const auto rep = solver_->advance(*state_);
        ++out.steps;
        out.elapsed += state_->time - t_prev;
        double change = 0.0;
        for (std::size_t i = 0; i < before.size(); ++i)
            change = std::max(change, std::abs(state_->temperature[i] - before[i]));
        const double storage = (solver_->stored_energy(*state_) - e_prev) / (state_->time - t_prev);
        const double scale = std::max(std::abs(generation), std::abs(solver_->interface_outflow(*state_)));
        progress.elapsed_time = out.elapsed;
        progress.steps = out.steps;
        progress.residuals.push_back(rep.residual);
        progress.unknown_change = change;
        progress.monitor.push_back(solver_->stored_energy(*state_));
        // fraction of the throughput still going into storage
        progress.energy_imbalance = scale > 0.0 ? std::abs(storage) / scale : 0.0;
        if (options_.series_csv) write_heat_series_row(*options_.series_csv, *solver_, *state_);
        if (check_trigger(options_.trigger, progress)) {
            out.trigger_fired = true;
            break;
        }
    }
    if (out.elapsed > 0.0) heat_load_ = generation - (solver_->stored_energy(*state_) - e0) / out.elapsed;
    return out;
}

InterfaceData SolidAdapter::export_interface() const {
    InterfaceData d;
    d.values = solver_->surface_temperature(*state_, tag_);
    d.heat_load = heat_load_;
    const auto [lo, hi] = std::minmax_element(d.values.begin(), d.values.end());
    d.t_min = *lo;
    d.t_max = *hi;
    return d;
}

void write_diagnostics_header(std::ostream& os) {
    os << "iter,sum_abs_dT,q_cfd,q_ctd,tmin_cfd,tmax_cfd,tmin_ctd,tmax_ctd\n";
}

void write_diagnostics_row(std::ostream& os, const DiagnosticsRow& r) {
    os << r.iter << ',' << fmt(r.sum_abs_dT) << ',' << fmt(r.q_cfd) << ',' << fmt(r.q_ctd) << ',' << fmt(r.tmin_cfd)
       << ',' << fmt(r.tmax_cfd) << ',' << fmt(r.tmin_ctd) << ',' << fmt(r.tmax_ctd) << '\n';
}

void write_diagnostics_csv(std::ostream& os, const CouplingDiagnostics& d) {
    write_diagnostics_header(os);
    for (const auto& r : d.rows) write_diagnostics_row(os, r);
}

void SessionOptions::validate() const {
    if (!(relaxation > 0.0 && relaxation <= 1.0)) throw std::invalid_argument("relaxation must lie in (0, 1]");
    if (outer_trigger) outer_trigger->validate();
}

CouplingSession::CouplingSession(CodeAdapter& fluid, CodeAdapter& solid, const InterfaceMap* map,
                                 SessionOptions options)
    : fluid_(&fluid), solid_(&solid), map_(map), options_(std::move(options)) {
    options_.validate();
}

std::vector<double> CouplingSession::to_fluid(std::span<const double> t) const {
    return map_ ? map_->temperature_to_fluid(t) : std::vector<double>(t.begin(), t.end());
}

std::vector<double> CouplingSession::to_solid(std::span<const double> q) const {
    return map_ ? map_->flux_to_solid(q) : std::vector<double>(q.begin(), q.end());
}

CouplingDiagnostics CouplingSession::run() {
    CouplingDiagnostics diag;
    std::ofstream csv;
    if (options_.diagnostics_csv) {
        csv.open(*options_.diagnostics_csv, std::ios::binary | std::ios::trunc);
        if (!csv) throw std::runtime_error("cannot write " + options_.diagnostics_csv->string());
        write_diagnostics_header(csv);
        csv.flush();
    }
    if (options_.outer_iterations == 0) return diag;

    auto call = [&](CodeAdapter& a, const char* what) { log_.push_back(a.name() + "." + what); };

    call(*solid_, "export");
    std::vector<double> wall = to_fluid(solid_->export_interface().values);
    ProgressRecord progress;
    for (std::size_t iter = 1; iter <= options_.outer_iterations; ++iter) {
        call(*fluid_, "import");
        fluid_->import_interface(wall);
        call(*fluid_, "advance");
        fluid_->advance();
        call(*fluid_, "export");
        const auto fe = fluid_->export_interface();

        call(*solid_, "import");
        solid_->import_interface(to_solid(fe.values));
        call(*solid_, "advance");
        solid_->advance();
        call(*solid_, "export");
        const auto se = solid_->export_interface();

        const auto mapped = to_fluid(se.values);
        DiagnosticsRow row;
        row.iter = iter;
        for (std::size_t k = 0; k < mapped.size(); ++k) row.sum_abs_dT += std::abs(wall[k] - mapped[k]);
        row.q_cfd = fe.heat_load;
        row.q_ctd = se.heat_load;
        row.tmin_cfd = fe.t_min;
        row.tmax_cfd = fe.t_max;
        row.tmin_ctd = se.t_min;
        row.tmax_ctd = se.t_max;
        diag.rows.push_back(row);
        diag.fluid_clock.push_back(fluid_->local_time());
        diag.solid_clock.push_back(solid_->local_time());
        if (csv.is_open()) {
            write_diagnostics_row(csv, row);
            csv.flush();
        }
        if (options_.on_iteration) options_.on_iteration(row);

        const double w = options_.relaxation;
        for (std::size_t k = 0; k < wall.size(); ++k) wall[k] = w * mapped[k] + (1.0 - w) * wall[k];

        progress.steps = iter;
        progress.elapsed_time = fluid_->local_time();
        progress.residuals.push_back(row.sum_abs_dT);
        progress.monitor.push_back(row.sum_abs_dT);
        progress.unknown_change = row.sum_abs_dT;
        progress.energy_imbalance =
            row.q_ctd != 0.0 ? std::abs(row.q_cfd - row.q_ctd) / std::abs(row.q_ctd)
                             : (row.q_cfd == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
        if (options_.outer_trigger && check_trigger(*options_.outer_trigger, progress)) {
            diag.outer_trigger_fired = true;
            break;
        }
    }
    return diag;
}

} // namespace bcm
