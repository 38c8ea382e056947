#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <variant>
#include <vector>

namespace bcm {

/// What a code reports about its own progress inside one macro-step.
struct ProgressRecord {
    double elapsed_time = 0.0; ///< local clock advance since the macro-step began (s)
    std::size_t steps = 0;
    std::vector<double> residuals; ///< one entry per step
    /// Max-norm change of the unknowns over the last step.
    double unknown_change = std::numeric_limits<double>::infinity();
    double geometry_change = 0.0; ///< cm
    std::vector<double> monitor;  ///< scalar signal sampled once per step
    /// |q_a - q_b| / |q_b| for whatever balance the owner tracks.
    double energy_imbalance = std::numeric_limits<double>::infinity();
};

struct TimeIncrement {
    double budget;
};
struct StepCount {
    std::size_t steps;
};
/// Fires once the residual has fallen by `factor` relative to the first entry.
struct ResidualDecrease {
    double factor;
};
struct UnknownChange {
    double threshold;
};
struct GeometryChange {
    double threshold;
};
/// Fires when the last `window` monitor samples repeat the preceding
/// `window` samples within `tolerance` times the largest sample magnitude.
struct QuasiPeriodic {
    std::size_t window;
    double tolerance;
};
struct EnergyBalance {
    double tolerance;
};

struct StopTrigger;
struct AnyOf {
    std::vector<StopTrigger> members;
};

struct StopTrigger {
    std::variant<TimeIncrement, StepCount, ResidualDecrease, UnknownChange, GeometryChange, QuasiPeriodic,
                 EnergyBalance, AnyOf>
        kind;

    /// Throws std::invalid_argument on non-positive thresholds or an empty AnyOf.
    void validate() const;
    std::string describe() const;
};

bool check_trigger(const StopTrigger& trigger, const ProgressRecord& progress);

StopTrigger any_of(std::vector<StopTrigger> members);

} // namespace bcm
