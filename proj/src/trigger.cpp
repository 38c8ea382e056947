#include "bcm/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bcm {

namespace {

template <class... F>
struct overloaded : F... {
    using F::operator()...;
};

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(what) + " must be positive");
}

} // namespace

void StopTrigger::validate() const {
    std::visit(overloaded{
                   [](const TimeIncrement& t) { require_positive(t.budget, "time_increment budget"); },
                   [](const StepCount& t) {
                       if (t.steps == 0) throw std::invalid_argument("step_count must be at least 1");
                   },
                   [](const ResidualDecrease& t) { require_positive(t.factor, "residual_decrease factor"); },
                   [](const UnknownChange& t) { require_positive(t.threshold, "unknown_change threshold"); },
                   [](const GeometryChange& t) { require_positive(t.threshold, "geometry_change threshold"); },
                   [](const QuasiPeriodic& t) {
                       if (t.window == 0) throw std::invalid_argument("quasi_periodic window must be at least 1");
                       require_positive(t.tolerance, "quasi_periodic tolerance");
                   },
                   [](const EnergyBalance& t) { require_positive(t.tolerance, "energy_balance tolerance"); },
                   [](const AnyOf& t) {
                       if (t.members.empty()) throw std::invalid_argument("any_of needs at least one member");
                       for (const auto& m : t.members) m.validate();
                   },
               },
               kind);
}

std::string StopTrigger::describe() const {
    std::ostringstream os;
    std::visit(overloaded{
                   [&](const TimeIncrement& t) { os << "time_increment(" << t.budget << ")"; },
                   [&](const StepCount& t) { os << "step_count(" << t.steps << ")"; },
                   [&](const ResidualDecrease& t) { os << "residual_decrease(" << t.factor << ")"; },
                   [&](const UnknownChange& t) { os << "unknown_change(" << t.threshold << ")"; },
                   [&](const GeometryChange& t) { os << "geometry_change(" << t.threshold << ")"; },
                   [&](const QuasiPeriodic& t) { os << "quasi_periodic(" << t.window << ", " << t.tolerance << ")"; },
                   [&](const EnergyBalance& t) { os << "energy_balance(" << t.tolerance << ")"; },
                   [&](const AnyOf& t) {
                       os << "any_of(";
                       for (std::size_t i = 0; i < t.members.size(); ++i)
                           os << (i ? ", " : "") << t.members[i].describe();
                       os << ")";
                   },
               },
               kind);
    return os.str();
}

bool check_trigger(const StopTrigger& trigger, const ProgressRecord& p) {
    return std::visit(
        overloaded{
            // relative slack so a budget summed from many dt still fires
            [&](const TimeIncrement& t) { return p.elapsed_time >= t.budget * (1.0 - 1e-12); },
            [&](const StepCount& t) { return p.steps >= t.steps; },
            [&](const ResidualDecrease& t) {
                if (p.residuals.empty()) return false;
                const double first = p.residuals.front(), last = p.residuals.back();
                if (first == 0.0) return last == 0.0;
                return last * t.factor <= first;
            },
            [&](const UnknownChange& t) { return p.unknown_change <= t.threshold; },
            [&](const GeometryChange& t) { return p.geometry_change >= t.threshold; },
            [&](const QuasiPeriodic& t) {
                const auto& m = p.monitor;
                if (m.size() < 2 * t.window) return false;
                double scale = 0.0, diff = 0.0;
                for (std::size_t i = m.size() - 2 * t.window; i < m.size(); ++i) scale = std::max(scale, std::abs(m[i]));
                for (std::size_t i = m.size() - t.window; i < m.size(); ++i)
                    diff = std::max(diff, std::abs(m[i] - m[i - t.window]));
                return diff <= t.tolerance * scale;
            },
            [&](const EnergyBalance& t) { return p.energy_imbalance <= t.tolerance; },
            [&](const AnyOf& t) {
                return std::any_of(t.members.begin(), t.members.end(),
                                   [&](const StopTrigger& m) { return check_trigger(m, p); });
            },
        },
        trigger.kind);
}

StopTrigger any_of(std::vector<StopTrigger> members) { return StopTrigger{AnyOf{std::move(members)}}; }

} // namespace bcm
