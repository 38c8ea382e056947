#pragma once

#include "bcm/linsolve.hpp"
#include "bcm/mesh.hpp"

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace bcm {

/// cgs; defaults are the steel of the reference case.
struct SolidMaterial {
    double density = 7.85;
    double specific_heat = 4.2e6;
    double conductivity = 5.0e6;

    void validate() const;
};

struct SolidProps {
    std::vector<SolidMaterial> materials{SolidMaterial{}};
    /// Index into materials per element; empty means material 0 everywhere.
    std::vector<std::size_t> element_material;
};

struct HeatSchemeParams {
    double theta = 1.0;
    double dt = 10.0; ///< s
    double tolerance = 1e-10;

    void validate() const;
};

struct SolidState {
    std::vector<double> temperature;
    std::vector<double> volumetric_load; ///< per element, erg/(cm^3 s)
    std::vector<double> interface_flux;  ///< per boundary facet, outward, erg/(cm^2 s)
    double time = 0.0;
    std::size_t steps = 0;
};

struct HeatStepReport {
    std::size_t iterations = 0;
    double residual = 0.0;
};

/// Free-node system (C/dt + theta K) dT = -K T + f with Dirichlet rows eliminated.
struct HeatSystem {
    SparseSpd matrix;
    std::vector<double> rhs;
    std::vector<std::size_t> free_nodes;
};

/// Linear conduction with a lumped capacity and the theta scheme. Boundaries
/// in `fixed_temperature` are Dirichlet; every other boundary is insulated
/// apart from the outward flux stored in SolidState::interface_flux.
class HeatSolver {
public:
    HeatSolver(const SimplexMesh& mesh, SolidProps props, std::map<std::string, double> fixed_temperature = {},
               HeatSchemeParams params = {});

    const SimplexMesh& mesh() const { return *mesh_; }
    const HeatSchemeParams& params() const { return params_; }
    /// Lumped rho c_p A / 3 per node, erg/K.
    const std::vector<double>& capacity() const { return capacity_; }
    const SparseSpd& stiffness() const { return stiffness_; }
    const std::vector<bool>& fixed() const { return fixed_; }

    SolidState make_state(double temperature) const;

    /// Sets the outward flux on the facets of `tag`, in facets_with_tag order.
    void set_interface_flux(SolidState& state, int tag, std::span<const double> flux) const;
    void set_uniform_load(SolidState& state, double load) const;

    HeatSystem assemble(const SolidState& state) const;
    HeatStepReport advance(SolidState& state) const;

    /// Nodal temperatures of the nodes on `tag`, in nodes_with_tag order.
    std::vector<double> surface_temperature(const SolidState& state, int tag) const;

    /// Sum of C_i T_i, erg.
    double stored_energy(const SolidState& state) const;
    /// Volumetric generation integrated over the mesh, erg/s.
    double generation(const SolidState& state) const;
    /// Interface flux integrated over the boundary, erg/s leaving the solid.
    double interface_outflow(const SolidState& state) const;

private:
    std::vector<double> load_vector(const SolidState& state) const;

    const SimplexMesh* mesh_;
    SolidProps props_;
    HeatSchemeParams params_;
    std::vector<double> capacity_;
    SparseSpd stiffness_;
    std::vector<bool> fixed_;
    std::vector<double> fixed_value_;
    std::vector<std::size_t> free_nodes_;
    SparseSpd free_block_;
};

void write_heat_series_header(std::ostream& os);
/// step,time,min_T,max_T,stored_energy
void write_heat_series_row(std::ostream& os, const HeatSolver& solver, const SolidState& state);

} // namespace bcm
