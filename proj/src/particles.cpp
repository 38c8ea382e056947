#include "bcm/particles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>

namespace bcm {

namespace {

constexpr double pi = std::numbers::pi;
constexpr double kReynoldsFloor = 1e-10;
constexpr std::size_t kMaxReflections = 8;

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double mass_of_d3(const ParticleProps& props, double d3) { return props.density * pi * d3 / 6.0; }

} // namespace

void ParticleProps::validate() const {
    require(density > 0.0, "particle density must be positive");
    require(specific_heat > 0.0, "particle specific heat must be positive");
    require(boiling_temp > 0.0, "boiling temperature must be positive");
    require(latent_heat > 0.0, "latent heat must be positive");
    require(radiation >= 0.0, "radiation coefficient must be non-negative");
    require(min_diameter > 0.0, "minimum diameter must be positive");
}

void Injection::validate() const {
    require(rate >= 0.0 && std::isfinite(rate), "injection rate must be non-negative");
    require(diameter > 0.0, "injection diameter must be positive");
    require(temperature > 0.0, "injection temperature must be positive");
    require(multiplicity >= 1.0, "injection multiplicity must be at least 1");
}

void ParticleSchemeParams::validate() const {
    require(rk_stages >= 1, "particle rk_stages must be at least 1");
    require(split_below <= merge_above, "split_below must not exceed merge_above");
    require(merge_velocity_tol >= 0.0 && merge_temperature_tol >= 0.0 && merge_diameter_tol >= 0.0,
            "merge tolerances must be non-negative");
}

std::size_t ParcelSet::alive_count() const {
    return static_cast<std::size_t>(std::count_if(parcels.begin(), parcels.end(), [](const Parcel& p) { return p.alive; }));
}

double reynolds(double rho, double mu, double slip, double d) { return rho * slip * d / mu; }

double drag_coefficient(double re) {
    const double r = std::max(re, kReynoldsFloor);
    return std::max(0.1, 24.0 / r * (1.0 + 0.15 * std::pow(r, 0.687)));
}

double prandtl(const FluidProps& fluid) { return fluid.specific_heat * fluid.viscosity / fluid.conductivity; }

double nusselt(double re, double pr) { return 2.0 + 0.459 * std::pow(pr, 0.333) * std::pow(re, 0.55); }

double film_coefficient(const FluidProps& fluid, double re, double d) {
    return nusselt(re, prandtl(fluid)) * fluid.conductivity / d;
}

double droplet_mass(const ParticleProps& props, double d) { return mass_of_d3(props, d * d * d); }

double droplet_heat_rate(const ParcelOde& p, const FluidSample& f, const FluidProps& fluid,
                         const ParticleProps& props) {
    const double d = std::cbrt(p.d3);
    if (d <= 0.0) return 0.0;
    const double re = reynolds(fluid.density, fluid.viscosity, norm(f.velocity - p.velocity), d);
    const double t4 = f.temperature * f.temperature * f.temperature * f.temperature;
    const double tp4 = p.temperature * p.temperature * p.temperature * p.temperature;
    return 0.25 * pi * d * d *
           (film_coefficient(fluid, re, d) * (f.temperature - p.temperature) + props.radiation * (t4 - tp4));
}

ParcelOde parcel_rhs(const ParcelOde& p, const FluidSample& f, const FluidProps& fluid, const ParticleProps& props) {
    ParcelOde r;
    r.position = p.velocity;
    r.temperature = 0.0;
    r.d3 = 0.0;
    const double d = std::cbrt(std::max(p.d3, 0.0));
    if (d < props.min_diameter) return r;
    const Vec2 slip = f.velocity - p.velocity;
    const double re = reynolds(fluid.density, fluid.viscosity, norm(slip), d);
    const double alpha_v = 3.0 * fluid.density * drag_coefficient(re) / (4.0 * props.density * d);
    r.velocity = alpha_v * norm(slip) * slip;
    const double q = droplet_heat_rate(p, f, fluid, props);
    if (p.temperature >= props.boiling_temp && q > 0.0)
        r.d3 = -6.0 * q / (pi * props.density * props.latent_heat);
    else
        r.temperature = q / (mass_of_d3(props, p.d3) * props.specific_heat);
    return r;
}

bool evaporate(Parcel& p, double q, double dt, const ParticleProps& props) {
    if (!p.alive) return false;
    if (p.temperature < props.boiling_temp || q <= 0.0) return true;
    const double d3 = p.diameter * p.diameter * p.diameter - 6.0 * q * dt / (pi * props.density * props.latent_heat);
    p.diameter = d3 > 0.0 ? std::cbrt(d3) : 0.0;
    if (p.diameter < props.min_diameter) p.alive = false;
    return p.alive;
}

Vec2 ParcelUpdate::momentum_to_fluid(double dt) const {
    return (-multiplicity * mass_start / dt) * (velocity_end - velocity_start - wall_impulse / mass_start);
}

double ParcelUpdate::energy_to_fluid(double dt, const ParticleProps& props) const {
    const double c = props.specific_heat;
    const double sensible = mass_end * c * temperature_end - mass_start * c * temperature_start;
    const double vapour = (mass_end - mass_start) * (c * props.boiling_temp + props.latent_heat);
    return -multiplicity * (sensible - vapour) / dt;
}

ParticleTracker::ParticleTracker(const SimplexMesh& mesh, FluidProps fluid, ParticleProps props, const FlowBc& bc,
                                 ParticleSchemeParams params)
    : mesh_(&mesh), fluid_(fluid), props_(props), params_(params) {
    fluid_.validate();
    props_.validate();
    params_.validate();
    element_facet_.assign(mesh.num_elements(), {kNoNeighbor, kNoNeighbor, kNoNeighbor});
    removes_.assign(mesh.boundary_facets().size(), false);
    for (std::size_t f = 0; f < mesh.boundary_facets().size(); ++f) {
        const auto& bf = mesh.boundary_facets()[f];
        element_facet_[bf.element][bf.local_facet] = f;
        const auto it = bc.find(mesh.tag_name(bf.tag));
        if (it == bc.end()) throw std::invalid_argument("no boundary condition for tag '" + mesh.tag_name(bf.tag) + "'");
        removes_[f] = !std::holds_alternative<WallBc>(it->second);
    }
}

FluidSample ParticleTracker::sample(const FlowState& fluid, std::size_t host, const Vec2& x) const {
    const auto w = shape_functions(*mesh_, host, x);
    const auto& el = mesh_->element(host);
    FluidSample s{{}, 0.0};
    for (int a = 0; a < 3; ++a) {
        s.velocity += w[a] * fluid.velocity[el[a]];
        s.temperature += w[a] * fluid.temperature[el[a]];
    }
    return s;
}

void ParticleTracker::add(ParcelSet& set, Parcel p) const {
    const auto host = locate_point_brute_force(*mesh_, p.position);
    if (!host) throw MeshError("parcel position lies outside the fluid mesh");
    p.host = *host;
    p.id = set.next_id++;
    set.parcels.push_back(p);
}

void ParticleTracker::set_injection(ParcelSet& set, const Injection& inj) const {
    inj.validate();
    set.injection = inj;
    set.rng.seed(inj.seed);
    set.injection_carry = 0.0;
}

std::size_t ParticleTracker::inject(ParcelSet& set, double dt) const {
    if (!set.injection) return 0;
    const auto& inj = *set.injection;
    set.injection_carry += inj.rate * dt;
    const auto count = static_cast<std::size_t>(std::floor(set.injection_carry));
    set.injection_carry -= static_cast<double>(count);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        const double s = u(set.rng);
        Parcel p;
        p.position = inj.start + s * (inj.end - inj.start);
        p.velocity = inj.velocity;
        p.temperature = inj.temperature;
        p.diameter = inj.diameter;
        p.multiplicity = inj.multiplicity;
        add(set, p);
    }
    return count;
}

ParticleTracker::TraceResult ParticleTracker::trace(std::size_t host, Vec2 from, Vec2 to, Vec2 velocity) const {
    const auto& m = *mesh_;
    const auto& nbrs = m.element_neighbors();
    TraceResult r;
    r.velocity = velocity;
    std::size_t cur = host;
    for (std::size_t bounce = 0; bounce <= kMaxReflections; ++bounce) {
        std::optional<std::size_t> hit_facet;
        double hit_s = 1.0;
        bool found = false;
        for (std::size_t hop = 0; hop <= 4 * m.num_elements(); ++hop) {
            const auto w1 = shape_functions(m, cur, to);
            if (weights_inside(w1)) {
                found = true;
                break;
            }
            const auto w0 = shape_functions(m, cur, from);
            // leave through the facet the segment crosses first
            int exit = -1;
            double s_exit = std::numeric_limits<double>::infinity();
            for (int k = 0; k < 3; ++k) {
                if (w1[k] >= 0.0) continue;
                const double a = std::max(w0[k], 0.0);
                const double s = a / (a - w1[k]);
                if (s < s_exit) {
                    s_exit = s;
                    exit = k;
                }
            }
            const std::size_t next = nbrs[cur][exit];
            if (next == kNoNeighbor) {
                hit_facet = element_facet_[cur][exit];
                hit_s = s_exit;
                break;
            }
            cur = next;
        }
        if (found) {
            r.element = cur;
            r.position = to;
            return r;
        }
        if (!hit_facet) {
            // walk failed to terminate; fall back to the exhaustive scan
            r.element = locate_point_brute_force(m, to);
            r.position = to;
            return r;
        }
        const Vec2 p = from + hit_s * (to - from);
        const auto& bf = m.boundary_facets()[*hit_facet];
        if (removes_[*hit_facet]) {
            r.element = cur;
            r.position = p;
            r.exited = true;
            return r;
        }
        const Vec2 n = m.facet_outward_normal(bf);
        to = to - 2.0 * dot(to - p, n) * n;
        const double vn = dot(r.velocity, n);
        if (vn > 0.0) {
            r.velocity = r.velocity - 2.0 * vn * n;
            r.wall_impulse_per_mass += -2.0 * vn * n;
        }
        from = p;
    }
    r.element = locate_point_brute_force(m, to);
    r.position = to;
    return r;
}

AdvanceReport ParticleTracker::advance(ParcelSet& set, const FlowState& fluid, double dt,
                                       const StageObserver& observer) const {
    AdvanceReport report;
    const auto alpha = rk_coefficients(params_.rk_stages);
    const double tb = props_.boiling_temp;
    const double d3_floor = props_.min_diameter * props_.min_diameter * props_.min_diameter;
    for (std::size_t idx = 0; idx < set.parcels.size(); ++idx) {
        Parcel& p = set.parcels[idx];
        if (!p.alive) continue;
        const ParcelOde u0{p.position, p.velocity, p.temperature, p.diameter * p.diameter * p.diameter};
        ParcelOde u = u0;
        std::size_t host = p.host;
        const double mc0 = mass_of_d3(props_, u0.d3) * props_.specific_heat;
        bool lock_v = false, lock_t = false, lost = false, flashed = false;
        TraceResult last;
        for (std::size_t i = 0; i < alpha.size(); ++i) {
            const FluidSample f = sample(fluid, host, u.position);
            const ParcelOde r = parcel_rhs(u, f, fluid_, props_);
            ParcelOde c;
            c.position = u0.position + (alpha[i] * dt) * r.position;
            c.velocity = u0.velocity + (alpha[i] * dt) * r.velocity;
            // heat goes into sensible heating up to the boiling point, the rest boils off mass
            const double e = alpha[i] * dt * droplet_heat_rate(u, f, fluid_, props_);
            c.temperature = u0.temperature + e / mc0;
            c.d3 = u0.d3;
            if (c.temperature > tb) {
                c.d3 -= (c.temperature - tb) * mc0 * 6.0 / (pi * props_.density * props_.latent_heat);
                c.temperature = tb;
            }
            if (params_.limit) {
                // once a stage would carry the parcel past the fluid value it follows the fluid
                const Vec2 wv = f.velocity - u0.velocity;
                if (lock_v || dot(c.velocity - u0.velocity, wv) > dot(wv, wv)) {
                    if (!lock_v) ++report.limited;
                    lock_v = true;
                    c.velocity = f.velocity;
                }
                const double wt = f.temperature - u0.temperature;
                if (lock_t || (c.temperature - u0.temperature) * wt > wt * wt) {
                    lock_t = true;
                    c.temperature = std::min(f.temperature, tb);
                }
            }
            if (c.d3 < d3_floor) {
                flashed = true;
                c.d3 = 0.0;
            }
            last = trace(p.host, u0.position, c.position, c.velocity);
            if (!last.element) {
                lost = true;
                break;
            }
            c.position = last.position;
            host = *last.element;
            if (observer) observer(p, i + 1, c.position, host);
            u = c;
            if (flashed) break;
        }

        ParcelUpdate up;
        up.index = idx;
        up.multiplicity = p.multiplicity;
        up.mass_start = mass_of_d3(props_, u0.d3);
        up.velocity_start = u0.velocity;
        up.temperature_start = u0.temperature;
        if (lost) {
            ++report.lost;
            std::fprintf(stderr, "particles: parcel %llu lost during tracking\n",
                         static_cast<unsigned long long>(p.id));
            p.alive = false;
            continue;
        }
        up.velocity_end = last.velocity;
        up.temperature_end = u.temperature;
        up.wall_impulse = up.mass_start * last.wall_impulse_per_mass;
        up.mass_end = mass_of_d3(props_, u.d3);
        const double d_end = std::cbrt(u.d3);
        if (last.exited) {
            up.exited = true;
            up.deposit_element = p.host;
            up.deposit_position = u0.position;
            p.alive = false;
            ++report.exited;
        } else {
            up.deposit_element = host;
            up.deposit_position = u.position;
            p.position = u.position;
            p.host = host;
        }
        p.velocity = up.velocity_end;
        p.temperature = u.temperature;
        p.diameter = d_end;
        if (p.alive && (flashed || d_end < props_.min_diameter)) {
            // the remainder flashes off; the fluid supplies its latent heat
            up.evaporated = true;
            up.mass_end = 0.0;
            p.alive = false;
            ++report.evaporated;
        }
        report.updates.push_back(up);
    }
    return report;
}

DepositTotals ParticleTracker::transfer_loads(const AdvanceReport& report, double dt, FlowState& fluid) const {
    DepositTotals tot;
    for (const auto& up : report.updates) {
        const Vec2 f = up.momentum_to_fluid(dt);
        const double q = up.energy_to_fluid(dt, props_);
        const auto w = shape_functions(*mesh_, up.deposit_element, up.deposit_position);
        const auto& el = mesh_->element(up.deposit_element);
        for (int a = 0; a < 3; ++a) {
            fluid.source_momentum[el[a]] += w[a] * f;
            fluid.source_energy[el[a]] += w[a] * q;
        }
        tot.momentum += f;
        tot.energy += q;
    }
    return tot;
}

void ParticleTracker::manage_parcels(ParcelSet& set) const {
    std::map<std::size_t, std::vector<std::size_t>> by_element;
    for (std::size_t i = 0; i < set.parcels.size(); ++i)
        if (set.parcels[i].alive) by_element[set.parcels[i].host].push_back(i);

    auto similar = [&](const Parcel& a, const Parcel& b) {
        const double vs = std::max(norm(a.velocity), norm(b.velocity));
        return norm(a.velocity - b.velocity) <= params_.merge_velocity_tol * vs &&
               std::abs(a.temperature - b.temperature) <= params_.merge_temperature_tol &&
               std::abs(a.diameter - b.diameter) <= params_.merge_diameter_tol * std::max(a.diameter, b.diameter);
    };

    std::vector<Parcel> born;
    for (auto& [element, list] : by_element) {
        std::size_t count = list.size();
        if (count > params_.merge_above) {
            for (std::size_t i = 0; i < list.size() && count > params_.merge_above; ++i) {
                Parcel& a = set.parcels[list[i]];
                if (!a.alive) continue;
                for (std::size_t j = i + 1; j < list.size() && count > params_.merge_above; ++j) {
                    Parcel& b = set.parcels[list[j]];
                    if (!b.alive || !similar(a, b)) continue;
                    const double ma = a.multiplicity * droplet_mass(props_, a.diameter);
                    const double mb = b.multiplicity * droplet_mass(props_, b.diameter);
                    const double wa = ma / (ma + mb), wb = mb / (ma + mb);
                    const double n = a.multiplicity + b.multiplicity;
                    const double d3 = (a.multiplicity * a.diameter * a.diameter * a.diameter +
                                       b.multiplicity * b.diameter * b.diameter * b.diameter) /
                                      n;
                    a.position = wa * a.position + wb * b.position;
                    a.velocity = wa * a.velocity + wb * b.velocity;
                    a.temperature = wa * a.temperature + wb * b.temperature;
                    a.diameter = std::cbrt(d3);
                    a.multiplicity = n;
                    b.alive = false;
                    --count;
                }
            }
        } else if (count < params_.split_below) {
            const auto& el = mesh_->element(element);
            std::vector<std::size_t> queue = list;
            auto at = [&](std::size_t q) -> Parcel& {
                return q < set.parcels.size() ? set.parcels[q] : born[q - set.parcels.size()];
            };
            for (std::size_t q = 0; q < queue.size() && count < params_.split_below; ++q) {
                Parcel a = at(queue[q]);
                if (a.multiplicity < 2.0) continue;
                const std::size_t k = static_cast<std::size_t>(a.id % 3);
                Parcel b = a;
                a.multiplicity *= 0.5;
                b.multiplicity = a.multiplicity;
                const Vec2 x = a.position;
                a.position = x + 0.25 * (mesh_->node(el[k]) - x);
                b.position = x + 0.25 * (mesh_->node(el[(k + 1) % 3]) - x);
                b.id = set.next_id++;
                at(queue[q]) = a;
                born.push_back(b);
                queue.push_back(queue[q]);
                queue.push_back(set.parcels.size() + born.size() - 1);
                ++count;
            }
        }
    }
    std::erase_if(set.parcels, [](const Parcel& p) { return !p.alive; });
    set.parcels.insert(set.parcels.end(), born.begin(), born.end());
}

AdvanceReport ParticleTracker::step(ParcelSet& set, FlowState& fluid, double dt) const {
    inject(set, dt);
    auto report = advance(set, fluid, dt);
    if (params_.two_way) transfer_loads(report, dt, fluid);
    manage_parcels(set);
    return report;
}

void write_parcels_header(std::ostream& os) { os << "id,x,y,u,v,T_p,d,N_p,alive\n"; }

void write_parcels_csv(std::ostream& os, const ParcelSet& set) {
    write_parcels_header(os);
    for (const auto& p : set.parcels) {
        os << p.id << ',' << fmt(p.position.x) << ',' << fmt(p.position.y) << ',' << fmt(p.velocity.x) << ','
           << fmt(p.velocity.y) << ',' << fmt(p.temperature) << ',' << fmt(p.diameter) << ','
           << fmt(p.multiplicity) << ',' << (p.alive ? 1 : 0) << '\n';
    }
}

} // namespace bcm
