#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rdiff/dynamics.hpp"

namespace rdiff::data {

using dynamics::AgentState;
using dynamics::ControlInput;
using dynamics::Point2;
using dynamics::Pose2;

struct Scene {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 12.0;
    double y_max = 8.0;
    std::vector<Point2> goals;
    double goal_radius = 0.5;

    /// 12 m x 8 m room, goals at the corners inset by 1 m.
    static Scene default_scene();
    void validate() const;
    bool contains(Point2 p) const;
    std::string to_json() const;
    static Scene from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static Scene load(const std::filesystem::path& path);
};

struct GeneratorConfig {
    int context_dim = dynamics::kDefaultContextDim;
    double dt = dynamics::kDefaultDt;
    std::vector<double> reference_speeds{0.4, 0.9, 1.4};
    double heading_gain = 2.0;
    double speed_gain = 1.0;
    double accel_bound = 0.5;
    double turn_bound = 1.0;
    double accel_noise = 0.1;
    double turn_noise = 0.2;
    double context_noise = 0.1;
    int max_steps = 200;

    void validate() const;
};

struct Episode {
    int id = 0;
    std::vector<AgentState> states;
    /// Goal being steered to at each state; -1 once every goal is visited.
    std::vector<int> goal_index;
    std::vector<int> visited_goals;
    std::vector<ControlInput> controls;
};

/// Goal-seeking episodes. Episode i uses a stream derived from (seed, i), so
/// the output does not depend on the thread count.
std::vector<Episode> generate_dataset(const Scene& scene, int n_episodes, std::uint64_t seed,
                                      const GeneratorConfig& config = {}, int threads = 1);

/// Header `episode_id,t,x,y,v,theta,ctx_0..ctx_{d-1},goal_idx`.
void write_episodes_csv(const std::filesystem::path& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_csv(const std::filesystem::path& path);

/// Rotates the planar context vectors (dims 0-1 and 2-3) by -theta.
std::vector<double> rotate_context(const std::vector<double>& context, double theta);

struct WindowConfig {
    int history = 10;
    int future = 30;
    int window_steps = 5;
    int stride = 5;

    void validate() const;
    int tokens_per_sample() const { return future / window_steps; }
    int min_length() const { return history + future + 1; }
};

/// One token-sized chunk in its own frame: window_steps + 1 points starting at
/// the origin, plus the contexts at the window_steps non-anchor steps.
struct TokenWindow {
    int episode_id = 0;
    int anchor = 0;  // state index of the origin point
    std::vector<Point2> positions;
    std::vector<double> contexts;  // window_steps x context_dim, row-major
};

struct SampleWindow {
    int episode_id = 0;
    int current = 0;  // state index of the current step
    Pose2 frame;      // global pose of the condition frame
    std::vector<Point2> past;             // history + 1 points, local, last at origin
    std::vector<double> past_contexts;    // (history + 1) x context_dim, rotated
    std::vector<Point2> future;           // future points in the condition frame
    std::vector<Point2> future_global;
    std::vector<TokenWindow> token_windows;
    std::vector<int> tokens;              // filled after tokenization

    /// Flattened past positions then contexts.
    std::vector<double> condition_vector() const;
};

struct WindowResult {
    std::vector<SampleWindow> windows;
    int skipped_episodes = 0;
};

WindowResult window_dataset(const std::vector<Episode>& episodes, const WindowConfig& config);

/// Token windows of every sample, one per (episode, anchor).
std::vector<TokenWindow> unique_token_windows(const std::vector<SampleWindow>& windows);

struct Split {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;

    std::string to_json() const;
    static Split from_json(const std::string& text);
};

/// Episode-level split with counts val = max(1, round(r_val n)),
/// test = max(1, round(r_test n)), train = the rest.
Split split_episodes(std::vector<int> episode_ids, double train_ratio, double val_ratio, double test_ratio,
                     std::uint64_t seed);

std::vector<SampleWindow> select(const std::vector<SampleWindow>& windows, const std::vector<int>& episode_ids);

}  // namespace rdiff::data
