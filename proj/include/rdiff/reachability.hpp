#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rdiff/dynamics.hpp"
#include "rdiff/tokens.hpp"

namespace rdiff::reach {

using dynamics::Pose2;

struct ReachSpec {
    double v_max = 1.5;           // m/s
    double turn_bound = 1.0;      // rad/s
    double accel_bound = 0.5;     // m/s^2
    double horizon = 5.0 / 3.0;   // s, T_vq * dt
    double target_radius = 0.3;   // m

    void validate() const;
    /// Radius of the disc that must contain every member: r + v_max * horizon.
    double reach_radius() const { return target_radius + v_max * horizon; }
};

struct Axis {
    double lo = 0.0;
    double hi = 1.0;
    int n = 2;
    bool periodic = false;

    /// Periodic axes exclude `hi` (it aliases `lo`).
    double spacing() const { return periodic ? (hi - lo) / n : (hi - lo) / (n - 1); }
    double coord(int i) const { return lo + spacing() * i; }
};

struct Grid3 {
    Axis x;
    Axis y;
    Axis theta;

    /// Square of half-width reach_radius + margin, theta periodic on [-pi, pi).
    static Grid3 default_for(const ReachSpec& spec, int spatial_points = 81, int heading_points = 33,
                             double margin = 0.5);

    std::size_t size() const {
        return static_cast<std::size_t>(x.n) * static_cast<std::size_t>(y.n) * static_cast<std::size_t>(theta.n);
    }
    std::size_t index(int ix, int iy, int it) const {
        return (static_cast<std::size_t>(ix) * static_cast<std::size_t>(y.n) + static_cast<std::size_t>(iy)) *
                   static_cast<std::size_t>(theta.n) +
               static_cast<std::size_t>(it);
    }
    /// Largest spatial cell size.
    double cell() const { return std::max(x.spacing(), y.spacing()); }

    void validate_for(const ReachSpec& spec) const;
};

struct SolverOptions {
    double cfl = 0.8;
    int threads = 1;
};

/// Level-set values of a backward reachable tube; the set is {V <= 0}.
class ValueFunction {
public:
    static constexpr std::uint32_t kVersion = 1;

    ValueFunction() = default;
    ValueFunction(ReachSpec spec, Grid3 grid, std::vector<double> values);

    const ReachSpec& spec() const { return spec_; }
    const Grid3& grid() const { return grid_; }
    const std::vector<double>& values() const { return values_; }
    double at(int ix, int iy, int it) const { return values_[grid_.index(ix, iy, it)]; }

    /// Trilinear interpolation in the target frame; nullopt outside the x/y box.
    std::optional<double> interpolate(double x, double y, double theta) const;
    /// Same, with x/y clamped to the grid box.
    double interpolate_clamped(double x, double y, double theta) const;

    void save(const std::filesystem::path& path) const;
    static ValueFunction load(const std::filesystem::path& path);

private:
    double trilinear(double fx, double fy, double theta) const;

    ReachSpec spec_;
    Grid3 grid_;
    std::vector<double> values_;
};

/// Backward reachable tube of a Dubins car (speed in [0, v_max], turn rate
/// bounded by turn_bound) for a disc target at the origin with free terminal
/// heading. Lax-Friedrichs Hamiltonian, second-order ENO, TVD-RK2 in time-to-go.
ValueFunction solve_brs(const ReachSpec& spec, const Grid3& grid, const SolverOptions& options = {});

/// Query expressed in the anchor's frame (translate, then rotate by -heading).
Pose2 relative_pose(Pose2 query, Pose2 anchor);

bool membership(const ValueFunction& vf, Pose2 query, Pose2 anchor);
double soft_membership(const ValueFunction& vf, Pose2 query, Pose2 anchor, double temperature);

/// Picks the value function used to test a transition into a segment whose
/// initial speed is `arrival_speed`. Speeds over the preceding horizon are
/// bounded on average by arrival_speed + accel_bound * horizon / 2; the
/// largest bucket not exceeding that bound is used (smallest bucket if none).
const ValueFunction& select_bucket(std::span<const ValueFunction> vf_set, double arrival_speed);

struct PairGeometry {
    std::vector<Pose2> prev_states;  // states of the earlier segment
    Pose2 anchor;                    // first state of the later segment
    double arrival_speed = 0.0;      // first-step speed of the later segment
};

/// Places `cur` after `prev` (pose continuity) in prev's token-local frame.
PairGeometry pair_geometry(const Segment& prev, const Segment& cur, double dt);

/// Minimum over prev states of soft membership (hard: all V <= 0, as 0/1).
double segment_feasibility(std::span<const Pose2> prev_states, Pose2 anchor, const ValueFunction& vf,
                           double temperature, bool hard);

double action_pair_feasibility(ActionToken prev, ActionToken cur, const TokenDecoder& decoder,
                               std::span<const ValueFunction> vf_set, double temperature, bool hard,
                               double dt = dynamics::kDefaultDt);

/// J x J table of soft pair scores, indexed [prev][cur].
class FeasibilityTable {
public:
    FeasibilityTable() = default;
    FeasibilityTable(int codebook_size, std::vector<double> entries, double temperature, Digest digest);

    int size() const { return size_; }
    double temperature() const { return temperature_; }
    const Digest& digest() const { return digest_; }
    const std::vector<double>& entries() const { return entries_; }

    double soft(int prev, int cur) const { return entries_[static_cast<std::size_t>(prev) * size_ + cur]; }
    /// sigma(-V/T) >= 0.5 exactly when every V <= 0.
    bool hard(int prev, int cur) const { return soft(prev, cur) >= 0.5; }

    /// "RDFT", 32-byte digest, u32 J, row-major f64 entries.
    void save(const std::filesystem::path& path) const;
    static FeasibilityTable load(const std::filesystem::path& path, double temperature);

private:
    int size_ = 0;
    std::vector<double> entries_;
    double temperature_ = 0.1;
    Digest digest_{};
};

Digest table_digest(std::span<const std::uint8_t> decoder_bytes, std::span<const ValueFunction> vf_set,
                    double temperature);

FeasibilityTable build_feasibility_table(const TokenDecoder& decoder, std::span<const ValueFunction> vf_set,
                                         double temperature, const Digest& digest, int threads = 1,
                                         double dt = dynamics::kDefaultDt);

/// Loads the cached table when its digest matches, otherwise builds and
/// rewrites it. `rebuilt` reports which happened.
FeasibilityTable load_or_build_table(const std::filesystem::path& path, const TokenDecoder& decoder,
                                     std::span<const ValueFunction> vf_set, double temperature,
                                     const Digest& digest, bool* rebuilt = nullptr, int threads = 1);

/// Mean over consecutive pairs of table scores (hard or soft).
double sequence_feasibility(std::span<const ActionToken> tokens, const FeasibilityTable& table, bool hard);

}  // namespace rdiff::reach
