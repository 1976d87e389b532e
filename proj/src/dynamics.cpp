#include "rdiff/dynamics.hpp"

#include <string>

namespace rdiff::dynamics {
namespace {

constexpr double kMinDisplacement = 1e-9;

void check_finite(const AgentState& s) {
    if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.v) || !std::isfinite(s.theta)) {
        fail(ErrorKind::numeric, "non-finite agent state");
    }
}

}  // namespace

AgentState step(const AgentState& state, const ControlInput& control, double dt) {
    if (!(dt > 0.0)) {
        fail(ErrorKind::validation, "step needs dt > 0");
    }
    check_finite(state);
    if (!std::isfinite(control.u1) || !std::isfinite(control.u2)) {
        fail(ErrorKind::numeric, "non-finite control input");
    }
    AgentState next = state;
    next.x = state.x + state.v * std::cos(state.theta) * dt;
    next.y = state.y + state.v * std::sin(state.theta) * dt;
    next.v = std::max(0.0, state.v + control.u1 * dt);
    next.theta = wrap_angle(state.theta + control.u2 * dt);
    return next;
}

std::vector<AgentState> rollout(const AgentState& initial, std::span<const ControlInput> controls, double dt) {
    if (controls.empty()) {
        fail(ErrorKind::validation, "rollout needs at least one control");
    }
    std::vector<AgentState> out;
    out.reserve(controls.size());
    AgentState s = initial;
    for (const auto& u : controls) {
        s = step(s, u, dt);
        out.push_back(s);
    }
    return out;
}

std::vector<FlatState> recover_flat_state(std::span<const Point2> positions, double dt) {
    if (positions.size() < 2) {
        fail(ErrorKind::validation, "recover_flat_state needs at least two positions, got " +
                                        std::to_string(positions.size()));
    }
    if (!(dt > 0.0)) {
        fail(ErrorKind::validation, "recover_flat_state needs dt > 0");
    }
    std::vector<FlatState> out(positions.size());
    double heading = 0.0;
    for (std::size_t i = 0; i + 1 < positions.size(); ++i) {
        const double dx = positions[i + 1].x - positions[i].x;
        const double dy = positions[i + 1].y - positions[i].y;
        const double d = std::hypot(dx, dy);
        if (!std::isfinite(d)) {
            fail(ErrorKind::numeric, "non-finite position in flat recovery");
        }
        if (d >= kMinDisplacement) {
            heading = std::atan2(dy, dx);
        }
        out[i] = FlatState{d / dt, heading};
    }
    out.back() = out[out.size() - 2];
    return out;
}

Point2 rotate(Point2 v, double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

Point2 to_local(const Pose2& frame, Point2 p) {
    return rotate({p.x - frame.x, p.y - frame.y}, frame.theta);
}

Point2 to_global(const Pose2& frame, Point2 p) {
    const double c = std::cos(frame.theta);
    const double s = std::sin(frame.theta);
    return {frame.x + c * p.x - s * p.y, frame.y + s * p.x + c * p.y};
}

double arrival_heading(std::span<const Point2> points, double fallback) {
    for (std::size_t i = points.size(); i >= 2; --i) {
        const double dx = points[i - 1].x - points[i - 2].x;
        const double dy = points[i - 1].y - points[i - 2].y;
        if (std::hypot(dx, dy) >= kMinDisplacement) {
            return std::atan2(dy, dx);
        }
    }
    return fallback;
}

}  // namespace rdiff::dynamics
