#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rdiff/data.hpp"
#include "rdiff/reachability.hpp"
#include "rdiff/tokens.hpp"

namespace rdiff::eval {

using dynamics::Point2;
using Trajectory = std::vector<Point2>;

/// Mean Euclidean distance over timesteps.
double ade(std::span<const Point2> pred, std::span<const Point2> truth);
/// Distance at the final timestep.
double fde(std::span<const Point2> pred, std::span<const Point2> truth);

struct MinErrors {
    double min_ade = 0.0;
    double min_fde = 0.0;
};

/// Minimum ADE and minimum FDE, each taken independently.
MinErrors min_over_samples(std::span<const Trajectory> samples, std::span<const Point2> truth);

/// Mean ADE between `pairs` unordered sample pairs drawn without replacement
/// (all pairs when fewer exist, or when `exhaustive`).
double multimodality(std::span<const Trajectory> samples, std::uint64_t seed, int pairs = 20,
                     bool exhaustive = false);

/// Number of distinct goals the trajectory passes within goal_radius of.
int goals_reached(std::span<const Point2> trajectory, const data::Scene& scene);
/// Fraction of samples reaching at least `m` distinct goals.
double goal_rate(std::span<const Trajectory> samples, const data::Scene& scene, int m = 1);

/// Mean hard sequence feasibility over token samples.
double feasibility_rate(std::span<const std::vector<int>> token_samples, const reach::FeasibilityTable& table);

/// Decodes tokens and chains the segments from `start`.
Trajectory decode_tokens(const TokenDecoder& decoder, std::span<const int> tokens, dynamics::Pose2 start);

/// Repeats the last observed displacement.
Trajectory constant_velocity(std::span<const Point2> past, int horizon);

struct ConditionMetrics {
    int condition_id = 0;
    int episode_id = 0;
    double mean_ade = 0.0;
    double mean_fde = 0.0;
    double min_ade = 0.0;
    double min_fde = 0.0;
    double multimodality = 0.0;
    double goal_rate = 0.0;
    double feasibility_rate = 0.0;
    double cv_ade = 0.0;
    double cv_fde = 0.0;
};

struct MetricReport {
    double ade = 0.0;
    double fde = 0.0;
    double min_ade = 0.0;
    double min_fde = 0.0;
    double multimodality = 0.0;
    double goal_rate = 0.0;
    double feasibility_rate = 0.0;
    double cv_ade = 0.0;
    double cv_fde = 0.0;
    int n_conditions = 0;
    int n_samples = 0;

    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
};

MetricReport aggregate(std::span<const ConditionMetrics> rows, int samples_per_condition);

}  // namespace rdiff::eval
