#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rdiff/data.hpp"
#include "rdiff/nn.hpp"

namespace rdiff {

struct DataSettings {
    int n_episodes = 2000;
    data::Scene scene = data::Scene::default_scene();
    data::GeneratorConfig generator;
    double train_ratio = 0.80;
    double val_ratio = 0.05;
    double test_ratio = 0.15;
};

struct HaqSettings {
    int codebook_size = 256;
    int code_dim = 128;
    std::vector<int> hidden_dims{256, 256};
    nn::Activation activation = nn::Activation::relu;
    double beta = 1.0;
    int epochs = 30;
    int batch_size = 128;
    int patience = 10;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
};

struct DiffusionSettings {
    int steps = 10;
    double schedule_offset = 0.008;
    int bits = 8;
    int time_dim = 16;
    std::vector<int> hidden_dims{512, 512, 512};
    nn::Activation activation = nn::Activation::gelu;
    int epochs = 60;
    int batch_size = 128;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
};

struct ReachSettings {
    std::vector<double> speed_buckets{0.5, 1.0, 1.5};
    double turn_bound = 1.0;
    double accel_bound = 0.5;
    double target_radius = 0.3;
    int grid_xy = 81;
    int grid_theta = 33;
    double grid_margin = 0.5;
    double cfl = 0.8;
    double temperature = 0.1;
};

struct SamplingSettings {
    double guidance_scale = 1.0;
    double bit_beta = 4.0;
    int samples = 20;
    int horizon = 30;
    int max_conditions = 0;  // 0: every test condition
    int multimodality_pairs = 20;
    bool exhaustive_pairs = false;
    int goal_count = 1;
    int plots = 6;
};

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out_dir = "run";
    DataSettings data;
    data::WindowConfig window;
    HaqSettings haq;
    DiffusionSettings diffusion;
    ReachSettings reach;
    SamplingSettings sampling;

    /// Throws a validation error naming the first offending field.
    void validate() const;
    /// Token horizon in seconds: window_steps * dt.
    double token_horizon() const { return window.window_steps * data.generator.dt; }

    std::string to_json() const;
    /// Overlays the keys present in `text` on the defaults.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
};

}  // namespace rdiff
