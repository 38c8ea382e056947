#pragma once

#include "bcm/flow.hpp"
#include "bcm/mesh.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

namespace bcm {

/// Droplet material, cgs.
struct ParticleProps {
    double density = 1.0;
    double specific_heat = 4.18e7;
    double boiling_temp = 373.15;
    double latent_heat = 2.26e10;
    double radiation = 0.0;    ///< sigma*, erg/(cm^2 s K^4)
    double min_diameter = 1e-4; ///< parcel dies below this

    void validate() const;
};

struct Parcel {
    std::uint64_t id = 0;
    Vec2 position;
    Vec2 velocity;
    double temperature = 300.0;
    double diameter = 0.01;
    double multiplicity = 1.0; ///< physical droplets represented
    std::size_t host = 0;
    bool alive = true;
};

/// Parcels released uniformly at random along the segment [start, end].
struct Injection {
    Vec2 start, end;
    double rate = 0.0; ///< parcels per second
    double diameter = 0.01;
    double temperature = 300.0;
    Vec2 velocity;
    double multiplicity = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
};

struct ParcelSet {
    std::vector<Parcel> parcels;
    std::optional<Injection> injection;
    std::uint64_t next_id = 0;
    double injection_carry = 0.0; ///< fractional parcels owed to the next step
    std::mt19937_64 rng;

    std::size_t alive_count() const;
};

struct ParticleSchemeParams {
    std::size_t rk_stages = 4;
    bool limit = true;
    bool two_way = true;
    std::size_t merge_above = 32; ///< merge in elements holding more parcels
    std::size_t split_below = 8;  ///< split in elements holding fewer parcels
    double merge_velocity_tol = 0.01;
    double merge_temperature_tol = 1.0;
    double merge_diameter_tol = 0.01;

    void validate() const;
};

double reynolds(double rho, double mu, double slip, double d);
/// max(0.1, 24/Re (1 + 0.15 Re^0.687)), Re floored at 1e-10.
double drag_coefficient(double re);
/// c_p mu / k.
double prandtl(const FluidProps& fluid);
double nusselt(double re, double pr);
/// Nu k / d.
double film_coefficient(const FluidProps& fluid, double re, double d);
double droplet_mass(const ParticleProps& props, double d);

/// Fluid values interpolated at a parcel.
struct FluidSample {
    Vec2 velocity;
    double temperature = 300.0;
};

/// Parcel state advanced by the integrator; d3 is the cubed diameter.
struct ParcelOde {
    Vec2 position;
    Vec2 velocity;
    double temperature = 300.0;
    double d3 = 1e-6;
};

/// Heat rate into one droplet, erg/s: (pi d^2 / 4) [h_f (T - T_p) + sigma* (T^4 - T_p^4)].
double droplet_heat_rate(const ParcelOde& p, const FluidSample& f, const FluidProps& fluid,
                         const ParticleProps& props);

/// Time derivatives of the parcel state. At the boiling point with heat
/// flowing in, the temperature is pinned and d(d^3)/dt = -6Q/(pi rho_p L).
/// Zero derivatives (other than position) once d is below the floor.
ParcelOde parcel_rhs(const ParcelOde& p, const FluidSample& f, const FluidProps& fluid, const ParticleProps& props);

/// Exact mass loss under a constant heat rate q at the boiling point.
/// Returns false when the parcel falls below the diameter floor.
bool evaporate(Parcel& p, double q, double dt, const ParticleProps& props);

/// Start and end of one parcel's step, enough to deposit its loads.
struct ParcelUpdate {
    std::size_t index = 0;       ///< into ParcelSet::parcels
    double mass_start = 0.0;     ///< per droplet
    double mass_end = 0.0;
    Vec2 velocity_start, velocity_end;
    double temperature_start = 0.0, temperature_end = 0.0;
    Vec2 wall_impulse;           ///< per droplet, from reflections
    double multiplicity = 1.0;
    std::size_t deposit_element = 0;
    Vec2 deposit_position;
    bool exited = false;
    bool evaporated = false;

    /// Force on the fluid, dyn; the reaction to drag summed over droplets.
    Vec2 momentum_to_fluid(double dt) const;
    /// Heat rate into the fluid, erg/s.
    double energy_to_fluid(double dt, const ParticleProps& props) const;
};

struct AdvanceReport {
    std::vector<ParcelUpdate> updates;
    std::size_t exited = 0;
    std::size_t evaporated = 0;
    std::size_t lost = 0; ///< host location failed
    std::size_t limited = 0;
};

struct DepositTotals {
    Vec2 momentum;  ///< dyn
    double energy = 0.0; ///< erg/s
};

/// Called for every stage of every parcel with the sampling position and its host.
using StageObserver = std::function<void(const Parcel&, std::size_t stage, const Vec2& position, std::size_t host)>;

/// Lagrangian parcel tracking on one fluid mesh. Walls reflect parcels
/// specularly; inflow and outflow boundaries remove them.
class ParticleTracker {
public:
    ParticleTracker(const SimplexMesh& mesh, FluidProps fluid, ParticleProps props, const FlowBc& bc,
                    ParticleSchemeParams params = {});

    const SimplexMesh& mesh() const { return *mesh_; }
    const ParticleProps& props() const { return props_; }
    const ParticleSchemeParams& params() const { return params_; }

    FluidSample sample(const FlowState& fluid, std::size_t host, const Vec2& x) const;

    /// Locates the host; throws MeshError when the position is outside.
    void add(ParcelSet& set, Parcel p) const;
    /// Seeds the generator and attaches the injection.
    void set_injection(ParcelSet& set, const Injection& inj) const;
    /// Releases the parcels owed for dt; returns how many.
    std::size_t inject(ParcelSet& set, double dt) const;

    /// k-stage Runge-Kutta u^i = u^n + alpha^i dt r(u^{i-1}), i = 1..k, with
    /// host relocation and fluid re-interpolation at every stage.
    AdvanceReport advance(ParcelSet& set, const FlowState& fluid, double dt,
                          const StageObserver& observer = {}) const;

    /// Adds the reaction loads to the fluid sources with end-of-step shape
    /// function weights; returns the totals deposited.
    DepositTotals transfer_loads(const AdvanceReport& report, double dt, FlowState& fluid) const;

    /// Merge and split by element occupancy, then drop dead parcels.
    void manage_parcels(ParcelSet& set) const;

    /// inject, advance, deposit (when two-way), manage.
    AdvanceReport step(ParcelSet& set, FlowState& fluid, double dt) const;

    /// Whether the boundary facet removes parcels rather than reflecting them.
    bool facet_removes(std::size_t facet) const { return removes_[facet]; }

private:
    struct TraceResult {
        std::optional<std::size_t> element;
        Vec2 position;
        Vec2 velocity;
        Vec2 wall_impulse_per_mass;
        bool exited = false;
    };
    TraceResult trace(std::size_t host, Vec2 from, Vec2 to, Vec2 velocity) const;

    const SimplexMesh* mesh_;
    FluidProps fluid_;
    ParticleProps props_;
    ParticleSchemeParams params_;
    std::vector<std::array<std::size_t, 3>> element_facet_; // boundary facet per local facet
    std::vector<bool> removes_;
};

void write_parcels_header(std::ostream& os);
/// id,x,y,u,v,T_p,d,N_p,alive
void write_parcels_csv(std::ostream& os, const ParcelSet& set);

} // namespace bcm
