#pragma once

#include "bcm/flow.hpp"
#include "bcm/heat.hpp"
#include "bcm/mesh.hpp"
#include "bcm/trigger.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bcm {

/// Linear interpolant on a source chain: value = wa * src[a] + wb * src[b],
/// with a and b indexing the source nodes in nodes_with_tag order.
struct ChainSample {
    std::size_t a = 0, b = 0;
    double wa = 1.0, wb = 0.0;
    double distance = 0.0; ///< from the sample point to the source chain, cm
};

/// Nearest-point projection between the interface chains of a fluid and a
/// solid mesh. Temperatures go from solid nodes to fluid nodes; fluxes go
/// from fluid facets to solid facet midpoints with an integral rescale.
class InterfaceMap {
public:
    /// Throws MeshError when the chains deviate by more than `tolerance` plus
    /// the sagitta of the two polygonal chains.
    static InterfaceMap build(const SimplexMesh& fluid, int fluid_tag, const SimplexMesh& solid, int solid_tag,
                              double tolerance = 1e-8);

    std::size_t fluid_node_count() const { return fluid_nodes_.size(); }
    std::size_t solid_node_count() const { return solid_nodes_.size(); }
    std::size_t fluid_facet_count() const { return fluid_lengths_.size(); }
    std::size_t solid_facet_count() const { return solid_lengths_.size(); }
    const std::vector<std::size_t>& fluid_nodes() const { return fluid_nodes_; }
    const std::vector<std::size_t>& solid_nodes() const { return solid_nodes_; }
    const std::vector<double>& fluid_facet_lengths() const { return fluid_lengths_; }
    const std::vector<double>& solid_facet_lengths() const { return solid_lengths_; }
    const std::vector<ChainSample>& temperature_samples() const { return to_fluid_; }
    const std::vector<ChainSample>& flux_samples() const { return to_solid_; }
    double max_deviation() const { return max_deviation_; }

    /// Solid interface temperatures (nodes_with_tag order) at the fluid interface nodes.
    std::vector<double> temperature_to_fluid(std::span<const double> solid_nodal) const;
    /// Fluid facet fluxes (facets_with_tag order) on the solid facets; the
    /// integral of q over the interface is preserved.
    std::vector<double> flux_to_solid(std::span<const double> fluid_facet_flux) const;

private:
    std::vector<std::size_t> fluid_nodes_, solid_nodes_;
    std::vector<std::array<std::size_t, 2>> fluid_facet_nodes_; // local node indices
    std::vector<double> fluid_lengths_, solid_lengths_;
    std::vector<ChainSample> to_fluid_, to_solid_;
    double max_deviation_ = 0.0;
};

/// Weighted evaluation of the samples over source values.
std::vector<double> interpolate_samples(std::span<const ChainSample> samples, std::span<const double> source);

/// Rescales `target` so that sum(target * target_lengths) equals `integral`.
/// Multiplicative when the target integral is at least 10% of
/// sum(|target| * lengths), an additive shift otherwise.
void conserve_integral(std::vector<double>& target, std::span<const double> target_lengths, double integral);

/// What one code hands to the orchestrator after a macro step.
struct InterfaceData {
    std::vector<double> values; ///< fluid: facet flux; solid: nodal temperature
    double heat_load = 0.0;     ///< erg/s crossing the interface as seen by this code
    double t_min = 0.0, t_max = 0.0;
};

struct AdvanceSummary {
    std::size_t steps = 0;
    double elapsed = 0.0; ///< local clock advance, s
    bool trigger_fired = false;
};

class CodeAdapter {
public:
    virtual ~CodeAdapter() = default;
    virtual std::string name() const = 0;
    virtual void import_interface(std::span<const double> values) = 0;
    /// Runs until the code's own trigger fires.
    virtual AdvanceSummary advance() = 0;
    virtual InterfaceData export_interface() const = 0;
    virtual double local_time() const = 0;
};

/// Called before every flow step with the freshly reset sources, typically
/// a parcel step that deposits its loads.
using ParticleHook = std::function<void(FlowState&, double)>;

struct FluidAdapterOptions {
    StopTrigger trigger{StepCount{500}};
    std::size_t max_steps = 100000;
    std::ostream* residual_csv = nullptr;
};

/// Imports the wall temperature on the interface nodes, exports q = -k dT/dn
/// on the interface facets (positive into the fluid).
class FluidAdapter : public CodeAdapter {
public:
    FluidAdapter(FlowSolver& solver, FlowState& state, int interface_tag, ParticleHook particles = {},
                 FluidAdapterOptions options = {});

    std::string name() const override { return "fluid"; }
    void import_interface(std::span<const double> values) override;
    AdvanceSummary advance() override;
    InterfaceData export_interface() const override;
    double local_time() const override { return state_->time; }

    /// Every flow step taken so far, across macro steps.
    const std::vector<StepReport>& history() const { return history_; }

private:
    FlowSolver* solver_;
    FlowState* state_;
    int tag_;
    std::vector<std::size_t> nodes_;
    ParticleHook particles_;
    FluidAdapterOptions options_;
    std::vector<StepReport> history_;
};

struct SolidAdapterOptions {
    StopTrigger trigger{StepCount{10}};
    std::size_t max_steps = 100000;
    std::ostream* series_csv = nullptr;
};

/// Imports the outward flux on the interface facets, exports the interface
/// nodal temperatures. The exported heat load is G - dE/dt over the last
/// macro step, the interface outflow implied by the solid's energy balance.
class SolidAdapter : public CodeAdapter {
public:
    SolidAdapter(const HeatSolver& solver, SolidState& state, int interface_tag, SolidAdapterOptions options = {});

    std::string name() const override { return "solid"; }
    void import_interface(std::span<const double> values) override;
    AdvanceSummary advance() override;
    InterfaceData export_interface() const override;
    double local_time() const override { return state_->time; }

private:
    const HeatSolver* solver_;
    SolidState* state_;
    int tag_;
    SolidAdapterOptions options_;
    double heat_load_;
};

struct DiagnosticsRow {
    std::size_t iter = 0;
    double sum_abs_dT = 0.0;
    double q_cfd = 0.0, q_ctd = 0.0;
    double tmin_cfd = 0.0, tmax_cfd = 0.0, tmin_ctd = 0.0, tmax_ctd = 0.0;
};

struct CouplingDiagnostics {
    std::vector<DiagnosticsRow> rows;
    std::vector<double> fluid_clock, solid_clock; ///< local times after each iteration
    bool outer_trigger_fired = false;
};

void write_diagnostics_header(std::ostream& os);
void write_diagnostics_row(std::ostream& os, const DiagnosticsRow& row);
void write_diagnostics_csv(std::ostream& os, const CouplingDiagnostics& d);

struct SessionOptions {
    std::size_t outer_iterations = 20;
    /// Checked after every iteration: unknown_change is sum |dT| and
    /// energy_imbalance is |q_cfd - q_ctd| / |q_ctd|.
    std::optional<StopTrigger> outer_trigger;
    double relaxation = 1.0; ///< on the exchanged temperature, (0, 1]
    /// Rows are flushed here as they are produced.
    std::optional<std::filesystem::path> diagnostics_csv;
    /// Called after every iteration's row is written.
    std::function<void(const DiagnosticsRow&)> on_iteration;

    void validate() const;
};

/// Barely coupled loop: the fluid imports the wall temperature and runs to
/// its trigger, exports flux; the solid imports it and runs to its trigger,
/// exports temperature. Each code keeps its own clock.
class CouplingSession {
public:
    /// A null map passes values through unchanged (matching interfaces).
    CouplingSession(CodeAdapter& fluid, CodeAdapter& solid, const InterfaceMap* map, SessionOptions options = {});

    /// Adapter errors propagate after the rows so far are on disk.
    CouplingDiagnostics run();

    /// "name.import", "name.advance", "name.export" in call order.
    const std::vector<std::string>& call_log() const { return log_; }

private:
    std::vector<double> to_fluid(std::span<const double> solid_temperature) const;
    std::vector<double> to_solid(std::span<const double> fluid_flux) const;

    CodeAdapter* fluid_;
    CodeAdapter* solid_;
    const InterfaceMap* map_;
    SessionOptions options_;
    std::vector<std::string> log_;
};

} // namespace bcm
