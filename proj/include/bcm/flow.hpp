#pragma once

#include "bcm/linsolve.hpp"
#include "bcm/mesh.hpp"
#include "bcm/trigger.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bcm {

/// cgs throughout.
struct FluidProps {
    double density = 0.00122;
    double viscosity = 1.85e-4;
    double conductivity = 2400.0;
    double specific_heat = 1.0e7;
    Vec2 gravity{0.0, 0.0};
    double expansion = 0.0;
    double reference_temp = 300.0;

    void validate() const;
};

struct InflowBc {
    Vec2 velocity;
    double temperature = 300.0;
};

enum class WallThermal { adiabatic, fixed, coupled };

/// No-slip wall moving rigidly: translation plus rotation about `center`.
struct WallBc {
    Vec2 translation;
    double angular_velocity = 0.0; ///< rad/s, counter-clockwise
    Vec2 center;
    WallThermal thermal = WallThermal::adiabatic;
    double temperature = 300.0; ///< used when thermal == fixed

    Vec2 velocity_at(const Vec2& x) const { return translation + angular_velocity * perp(x - center); }
};

/// Zero pressure datum, natural conditions for velocity and temperature.
struct OutflowBc {};

using BoundaryCondition = std::variant<InflowBc, WallBc, OutflowBc>;
/// Keyed by boundary tag name; every tag of the mesh needs an entry.
using FlowBc = std::map<std::string, BoundaryCondition>;

enum class EdgeDissipation { none, first_order, gradient_corrected };

/// Pressure-increment operator. `laplacian` is the P1 stiffness matrix and
/// makes the scheme enforce a divergence stabilised by K - D M^-1 D^T;
/// `exact` is D_F M^-1 D_F^T, which zeroes the Galerkin divergence but
/// carries spurious pressure modes.
enum class PressureOperator { laplacian, exact };

struct FlowSchemeParams {
    std::size_t rk_stages = 4;
    double theta = 0.5;
    double courant = 0.8;
    double dt_cap = 1.0e-3;          ///< s, also the step for a stagnant field
    std::optional<double> fixed_dt;  ///< bypasses the Courant estimate
    double dissipation = 0.1;
    EdgeDissipation dissipation_kind = EdgeDissipation::gradient_corrected;
    double pressure_tolerance = 1e-10;
    double implicit_tolerance = 1e-10;
    PressureOperator pressure_operator = PressureOperator::laplacian;
    Preconditioner pressure_preconditioner = Preconditioner::deflated_jacobi;
    std::size_t deflation_sectors = 16;
    std::size_t deflation_bands = 1;

    void validate() const;
};

struct FlowState {
    std::vector<Vec2> velocity;
    std::vector<double> pressure;
    std::vector<double> temperature;
    std::vector<Vec2> source_momentum; ///< nodal force, dyn (per cm depth)
    std::vector<double> source_energy; ///< nodal heat rate, erg/s
    double time = 0.0;
    std::size_t steps = 0;

    void reset_sources();
};

/// Low-storage Runge-Kutta coefficients 1/(k+1-i), i = 1..k.
std::vector<double> rk_coefficients(std::size_t k);

/// min(1, x) for the ratio x of the explicit diffusion limit to the chosen
/// step; x equals Re_h when dt is the advective limit h/|v|.
double gamma_factor(double re_h);

struct PressureResult {
    std::vector<double> increment;
    std::size_t iterations = 0;
    double residual = 0.0;
};

struct StepReport {
    std::size_t step = 0;
    double time = 0.0;
    double dt = 0.0;
    double momentum_residual = 0.0; ///< rms of (v^{n+1} - v^n)/dt over free nodes
    /// Max nodal divergence enforced by the projection after correction, 1/s.
    double divergence_norm = 0.0;
    double galerkin_divergence = 0.0; ///< max nodal |D v| / M after correction, 1/s
    double velocity_max = 0.0;      ///< max nodal |v| after the step
    double velocity_change = 0.0;   ///< max |v^{n+1} - v^n|
    double temperature_change = 0.0;
    std::size_t pressure_iterations = 0;
    double pressure_residual = 0.0; ///< relative, as reported by the solver
};

/// Projection-scheme solver for one fluid mesh. Operators that do not depend
/// on the timestep (pressure matrix, deflation space, edge coefficients) are
/// built once.
class FlowSolver {
public:
    FlowSolver(const SimplexMesh& mesh, FluidProps props, FlowBc bc, FlowSchemeParams params = {});

    const SimplexMesh& mesh() const { return *mesh_; }
    const FluidProps& props() const { return props_; }
    const FlowSchemeParams& params() const { return params_; }

    /// Uniform fields with boundary values imposed.
    FlowState make_state(const Vec2& velocity, double temperature) const;
    void apply_boundary_conditions(FlowState& state) const;

    /// Nodal wall temperatures for `coupled` walls; entries at other nodes are ignored.
    void set_coupled_temperature(std::span<const double> nodal);
    const std::vector<double>& coupled_temperature() const { return coupled_temperature_; }

    double compute_timestep(const FlowState& state) const;

    std::vector<Vec2> prediction(const FlowState& state, double dt) const;
    PressureResult pressure_correction(const std::vector<Vec2>& v_star, double dt) const;
    std::vector<Vec2> velocity_correction(const std::vector<Vec2>& v_star, const std::vector<double>& increment,
                                          double dt) const;
    /// Uses state.velocity as the advecting field.
    std::vector<double> advance_temperature(const FlowState& state, double dt) const;

    /// prediction, pressure, velocity correction, temperature; sources are
    /// taken as they stand in `state`.
    StepReport step(FlowState& state, double dt) const;

    /// (D v)_j / M_j at every node; D is the Galerkin divergence.
    std::vector<double> nodal_divergence(const std::vector<Vec2>& v) const;
    /// Max of |nodal divergence| over nodes whose pressure is solved for.
    double divergence_norm(const std::vector<Vec2>& v) const;

    /// Max over solved nodes of |D v* + (dt/rho) K dp| / M: the stabilised
    /// divergence left after the correction with the laplacian operator.
    double projection_residual(const std::vector<Vec2>& v_star, const std::vector<double>& increment,
                               double dt) const;

    /// q = -k dT/dn with n into the fluid, per facet of `tag` in
    /// mesh().facets_with_tag order. Positive q heats the fluid.
    std::vector<double> wall_heat_flux(const FlowState& state, int tag) const;

    const SparseSpd& pressure_matrix() const { return pressure_matrix_; }
    const Deflation& deflation() const { return deflation_; }
    /// Pressure system rhs -(rho/dt) D v* restricted to solved nodes.
    std::vector<double> pressure_rhs(const std::vector<Vec2>& v_star, double dt) const;
    const std::vector<bool>& velocity_dirichlet() const { return vel_fixed_; }
    const std::vector<bool>& temperature_dirichlet() const { return temp_fixed_; }
    const std::vector<bool>& pressure_solved() const { return p_solved_; }

private:
    std::vector<Vec2> momentum_rhs(const FlowState& state, const std::vector<Vec2>& u) const;
    std::vector<double> energy_rhs(const FlowState& state, const std::vector<double>& t) const;
    void add_dissipation(const std::vector<Vec2>& adv, std::span<const double> u, std::size_t stride,
                         double scale, std::span<double> out) const;
    double boundary_temperature(std::size_t node) const;

    const SimplexMesh* mesh_;
    FluidProps props_;
    FlowBc bc_;
    FlowSchemeParams params_;

    std::vector<bool> vel_fixed_, temp_fixed_, p_solved_;
    std::vector<Vec2> vel_value_;
    std::vector<double> temp_value_;
    std::vector<bool> temp_coupled_;
    std::vector<double> coupled_temperature_;

    std::vector<Vec2> edge_coeff_; // per mesh edge
    SparseSpd stiffness_;
    SparseSpd vel_block_, temp_block_; // stiffness restricted to free nodes
    std::vector<std::size_t> vel_free_index_, temp_free_index_, p_index_;
    std::vector<std::size_t> vel_free_nodes_, temp_free_nodes_, p_nodes_;
    SparseSpd pressure_matrix_;
    Deflation deflation_;
    bool pressure_nullspace_ = false;
};

struct MacroStepResult {
    std::size_t steps = 0;
    double elapsed = 0.0;
    bool trigger_fired = false;
    std::vector<StepReport> history;
};

/// Runs steps until `trigger` fires or `max_steps` is reached. Each step
/// resets the source accumulators, calls `before_step(state, dt)` (the
/// particle update deposits there), then advances the flow with the same dt.
/// Writes "step,time,dt,momentum_residual,divergence_norm" rows when
/// `residual_csv` is given.
MacroStepResult advance_flow_macro_step(const FlowSolver& solver, FlowState& state, const StopTrigger& trigger,
                                        std::size_t max_steps,
                                        const std::function<void(FlowState&, double)>& before_step = {},
                                        std::ostream* residual_csv = nullptr);

void write_residual_header(std::ostream& os);

} // namespace bcm
