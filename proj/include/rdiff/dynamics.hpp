#pragma once

#include <span>
#include <vector>

#include "rdiff/common.hpp"

// Dynamically extended Dubins car: x' = v cos(theta), y' = v sin(theta),
// v' = u1, theta' = u2.
namespace rdiff::dynamics {

inline constexpr int kDefaultContextDim = 50;
inline constexpr double kDefaultDt = 1.0 / 3.0;

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct AgentState {
    double x = 0.0;
    double y = 0.0;
    double v = 0.0;
    double theta = 0.0;
    std::vector<double> context;

    Point2 position() const { return {x, y}; }
};

struct ControlInput {
    double u1 = 0.0;  // acceleration, m/s^2
    double u2 = 0.0;  // turn rate, rad/s
};

/// One forward-Euler step; speed is clamped at zero and heading wrapped.
AgentState step(const AgentState& state, const ControlInput& control, double dt);

/// States after 1..n steps; element i is the result of i+1 steps.
std::vector<AgentState> rollout(const AgentState& initial, std::span<const ControlInput> controls, double dt);

struct FlatState {
    double v = 0.0;
    double theta = 0.0;
};

/// Recovers speed and heading from positions by finite differences. The last
/// element copies the penultimate; near-zero displacements keep the previous
/// heading (0 at the start).
std::vector<FlatState> recover_flat_state(std::span<const Point2> positions, double dt);

/// A planar pose used for frame changes.
struct Pose2 {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
};

/// Expresses `p` in the frame whose origin/heading is `frame`.
Point2 to_local(const Pose2& frame, Point2 p);
/// Inverse of to_local.
Point2 to_global(const Pose2& frame, Point2 p);
/// Rotates a planar vector by -theta (global direction into a frame).
Point2 rotate(Point2 v, double theta);

/// Heading of the last displacement longer than 1e-9 m, scanning backwards;
/// `fallback` when every displacement is degenerate.
double arrival_heading(std::span<const Point2> points, double fallback);

}  // namespace rdiff::dynamics
