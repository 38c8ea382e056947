#pragma once

#include "bcm/coupling.hpp"
#include "bcm/flow.hpp"
#include "bcm/heat.hpp"
#include "bcm/mesh.hpp"
#include "bcm/particles.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcm {

/// Every problem found in a config, one message per field.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> errors);
    const std::vector<std::string>& errors() const { return errors_; }

private:
    std::vector<std::string> errors_;
};

struct AnnulusSection {
    double inner_radius = 0.0;
    double outer_radius = 0.0;
    std::size_t n_radial = 4;
    std::size_t n_azimuthal = 64;
    double angle_offset = 0.0; ///< radians
    bool operator==(const AnnulusSection&) const = default;
};

struct FluidSection {
    double density = 0.0;
    double viscosity = 0.0;
    double conductivity = 0.0;
    double specific_heat = 0.0;
    double reference_pressure = 1.0e6; ///< dyn/cm^2, datum only
    bool operator==(const FluidSection&) const = default;
};

struct InflowSection {
    double velocity = 100.0;    ///< cm/s, speed given to injected parcels
    double temperature = 300.0; ///< K, rotor wall, initial fluid and parcels
    bool operator==(const InflowSection&) const = default;
};

struct SolidSection {
    double density = 0.0;
    double specific_heat = 0.0;
    double conductivity = 0.0;
    double volumetric_load = 0.0; ///< erg/(cm^3 s)
    double initial_temperature = 300.0;
    bool operator==(const SolidSection&) const = default;
};

struct ParticleSection {
    bool enabled = true;
    double density = 1.0;
    double specific_heat = 4.18e7;
    double boiling_temp = 373.15;
    double latent_heat = 2.26e10;
    double min_diameter = 1e-4;
    double diameter = 0.01;
    double rate = 1000.0; ///< parcels per second of fluid time
    double multiplicity = 1.0;
    std::uint64_t seed = 1;
    double injection_angle = 0.0; ///< degrees, radial injection segment
    bool operator==(const ParticleSection&) const = default;
};

struct FlowSchemeSection {
    std::size_t rk_stages = 4;
    double theta = 0.5;
    double courant = 0.8;
    double dt_cap = 1.0e-3;
    double dissipation = 0.1;
    double pressure_tolerance = 1e-10;
    std::size_t deflation_sectors = 16;
    bool operator==(const FlowSchemeSection&) const = default;
};

struct HeatSchemeSection {
    double theta = 1.0;
    double dt = 10.0;
    double tolerance = 1e-10;
    bool operator==(const HeatSchemeSection&) const = default;
};

struct ParticleSchemeSection {
    std::size_t rk_stages = 4;
    bool limit = true;
    bool two_way = true;
    std::size_t merge_above = 32;
    std::size_t split_below = 8;
    bool operator==(const ParticleSchemeSection&) const = default;
};

struct CouplingSection {
    bool enabled = true;
    std::size_t outer_iterations = 20;
    double relaxation = 1.0;
    std::size_t fluid_steps = 500;
    std::size_t solid_steps = 10;
    double outer_tolerance = 0.0; ///< stop once sum |dT| falls below; 0 disables
    bool operator==(const CouplingSection&) const = default;
};

struct OutputSection {
    std::string directory = "gap_output";
    std::size_t vtk_every = 5;     ///< outer iterations between snapshots; 0 keeps the final one only
    std::size_t parcels_every = 5;
    bool operator==(const OutputSection&) const = default;
};

/// One gap scenario: a fluid annulus inside a solid annulus sharing the
/// interface circle, cgs throughout.
struct ScenarioConfig {
    std::string units = "cgs";
    double depth = 2.0; ///< cm; the 2-D run is a planar slice
    AnnulusSection fluid_mesh;
    AnnulusSection solid_mesh;
    FluidSection fluid;
    InflowSection inflow;
    double rpm = 0.0;
    SolidSection solid;
    ParticleSection particles;
    FlowSchemeSection flow_scheme;
    HeatSchemeSection heat_scheme;
    ParticleSchemeSection particle_scheme;
    CouplingSection coupling;
    OutputSection output;

    bool operator==(const ScenarioConfig&) const = default;
};

/// Throws ConfigError listing every missing, unknown or invalid field.
ScenarioConfig parse_config(const std::string& text);
ScenarioConfig load_config(const std::filesystem::path& path);
void validate_config(const ScenarioConfig& config);
std::string serialize_config(const ScenarioConfig& config);
/// FNV-1a of the serialized config, as 16 hex digits.
std::string config_hash(const ScenarioConfig& config);

FluidProps fluid_props(const ScenarioConfig& config);
ParticleProps particle_props(const ScenarioConfig& config);
FlowSchemeParams flow_params(const ScenarioConfig& config);
ParticleSchemeParams particle_params(const ScenarioConfig& config);
SimplexMesh build_fluid_mesh(const ScenarioConfig& config);
SimplexMesh build_solid_mesh(const ScenarioConfig& config);

/// Meshes, solvers and states of one scenario. Not copyable; the members
/// refer to each other.
class GapScenario {
public:
    explicit GapScenario(const ScenarioConfig& config);
    GapScenario(const GapScenario&) = delete;
    GapScenario& operator=(const GapScenario&) = delete;

    const ScenarioConfig& config() const { return config_; }
    const SimplexMesh& fluid_mesh() const { return *fluid_mesh_; }
    const SimplexMesh& solid_mesh() const { return *solid_mesh_; }
    FlowSolver& flow() { return *flow_; }
    FlowState& flow_state() { return flow_state_; }
    const HeatSolver& heat() const { return *heat_; }
    SolidState& solid_state() { return solid_state_; }
    /// Null when particles are disabled.
    const ParticleTracker* tracker() const { return tracker_.get(); }
    ParcelSet& parcels() { return parcels_; }
    /// Null when coupling is disabled.
    const InterfaceMap* interface_map() const { return map_.get(); }

    /// Replaces the default per-step parcel update (inject, advance, deposit,
    /// manage) used by run_scenario.
    void set_particle_hook(ParticleHook hook) { hook_ = std::move(hook); }
    const ParticleHook& particle_hook() const { return hook_; }

    /// Rigid-wall Couette profile for the configured rotor speed, cm/s.
    double couette_velocity(double r) const;
    /// Max over nodes of |v - v_couette| / (omega r_inner).
    double couette_error() const;

private:
    ScenarioConfig config_;
    std::unique_ptr<SimplexMesh> fluid_mesh_, solid_mesh_;
    std::unique_ptr<FlowSolver> flow_;
    FlowState flow_state_;
    std::unique_ptr<HeatSolver> heat_;
    SolidState solid_state_;
    std::unique_ptr<ParticleTracker> tracker_;
    ParcelSet parcels_;
    std::unique_ptr<InterfaceMap> map_;
    ParticleHook hook_;
};

struct RunOverrides {
    std::optional<std::filesystem::path> output_dir;
    std::optional<std::size_t> outer_iterations;
};

struct RunOutcome {
    int status = 0; ///< 0 success, 1 failure
    std::string error;
    CouplingDiagnostics diagnostics;
    std::filesystem::path output_dir;
    std::vector<std::filesystem::path> files;
    double max_divergence_ratio = 0.0; ///< max over steps of div / (|v|max / h_min)
    std::optional<double> couette_error;
    std::vector<StepReport> flow_history; ///< every flow step of the run
};

/// Applies the overrides to `config` before building.
ScenarioConfig apply_overrides(ScenarioConfig config, const RunOverrides& overrides);

/// Runs the scenario and writes diagnostics, residual and heat series,
/// snapshots, parcel CSVs, summary.json and manifest.json. Errors are caught,
/// reported in the outcome and the manifest, and leave partial outputs.
RunOutcome run_scenario(GapScenario& scenario);
RunOutcome run_scenario(const ScenarioConfig& config, const RunOverrides& overrides = {});

/// Writes fluid_mesh.vtk and solid_mesh.vtk into the output directory.
std::vector<std::filesystem::path> write_meshes(const ScenarioConfig& config);

/// The JSON summary of a finished run.
std::string summary_json(const RunOutcome& outcome);

} // namespace bcm
