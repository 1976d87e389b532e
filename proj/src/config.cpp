#include "rdiff/config.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace rdiff {
namespace {

using json = nlohmann::json;

template <class T>
void take(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, "config field '" + where + key + "': " + e.what());
    }
}

void take_activation(const json& j, const char* key, nn::Activation& out, const std::string& where) {
    if (!j.contains(key)) return;
    std::string name;
    take(j, key, name, where);
    try {
        out = nn::parse_activation(name);
    } catch (const Error& e) {
        fail(ErrorKind::validation, "config field '" + where + key + "': " + e.what());
    }
}

const json& section(const json& j, const char* key) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) fail(ErrorKind::validation, std::string("config section '") + key + "' must be an object");
    return j.at(key);
}

void require(bool ok, const std::string& message) {
    if (!ok) fail(ErrorKind::validation, "invalid config: " + message);
}

void check_known(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) == keys.end()) {
            fail(ErrorKind::validation, "unknown config field '" + where + it.key() + "'");
        }
    }
}

}  // namespace

void RunConfig::validate() const {
    require(threads >= 1, "threads must be at least 1");
    require(!out_dir.empty(), "out_dir must not be empty");
    require(data.n_episodes >= 1, "data.n_episodes must be at least 1");
    data.scene.validate();
    data.generator.validate();
    require(data.generator.accel_bound == reach.accel_bound && data.generator.turn_bound == reach.turn_bound,
            "generator control bounds must match reach.accel_bound and reach.turn_bound");
    require(data.train_ratio >= 0 && data.val_ratio >= 0 && data.test_ratio >= 0 &&
                std::abs(data.train_ratio + data.val_ratio + data.test_ratio - 1.0) <= 1e-9,
            "data split ratios must be non-negative and sum to 1");
    window.validate();
    require(window.future % window.window_steps == 0, "window.future must be divisible by window.window_steps");
    require(haq.codebook_size >= 2 && haq.code_dim >= 1 && haq.beta >= 0, "haq sizes");
    require(haq.epochs >= 0 && haq.batch_size >= 1 && haq.patience >= 1, "haq training settings");
    require(haq.learning_rate > 0 && haq.weight_decay >= 0, "haq.learning_rate must be positive");
    require(diffusion.steps >= 1, "diffusion.steps must be at least 1");
    require(diffusion.bits >= 1 && diffusion.bits <= 16, "diffusion.bits must be in [1, 16]");
    require((1 << diffusion.bits) == haq.codebook_size, "haq.codebook_size must equal 2^diffusion.bits");
    require(diffusion.time_dim >= 2 && diffusion.time_dim % 2 == 0, "diffusion.time_dim must be even");
    require(diffusion.epochs >= 0 && diffusion.batch_size >= 1, "diffusion training settings");
    require(diffusion.learning_rate > 0 && diffusion.weight_decay >= 0, "diffusion.learning_rate must be positive");
    require(!reach.speed_buckets.empty(), "reach.speed_buckets must not be empty");
    require(std::is_sorted(reach.speed_buckets.begin(), reach.speed_buckets.end()) &&
                std::adjacent_find(reach.speed_buckets.begin(), reach.speed_buckets.end()) == reach.speed_buckets.end(),
            "reach.speed_buckets must be sorted ascending without duplicates");
    require(reach.speed_buckets.front() > 0, "reach.speed_buckets must be positive");
    require(reach.turn_bound > 0 && reach.accel_bound > 0 && reach.target_radius > 0, "reach bounds must be positive");
    require(reach.grid_xy >= 21 && reach.grid_theta >= 4, "reach grid too coarse");
    require(reach.cfl > 0 && reach.cfl <= 1, "reach.cfl must be in (0, 1]");
    require(reach.temperature > 0, "reach.temperature must be positive");
    require(sampling.guidance_scale >= 0, "sampling.guidance_scale must be non-negative");
    require(sampling.bit_beta > 0, "sampling.bit_beta must be positive");
    require(sampling.samples >= 2, "sampling.samples must be at least 2");
    require(sampling.horizon >= 1 && sampling.horizon <= window.future, "sampling.horizon must be in [1, window.future]");
    require(sampling.max_conditions >= 0 && sampling.multimodality_pairs >= 1 && sampling.goal_count >= 1 &&
                sampling.plots >= 0,
            "sampling counts");
}

std::string RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["out_dir"] = out_dir;
    const auto& g = data.generator;
    json goals = json::array();
    for (const auto& p : data.scene.goals) goals.push_back({p.x, p.y});
    j["data"] = {
        {"n_episodes", data.n_episodes},
        {"scene",
         {{"x_min", data.scene.x_min},
          {"y_min", data.scene.y_min},
          {"x_max", data.scene.x_max},
          {"y_max", data.scene.y_max},
          {"goals", goals},
          {"goal_radius", data.scene.goal_radius}}},
        {"context_dim", g.context_dim},
        {"dt", g.dt},
        {"reference_speeds", g.reference_speeds},
        {"heading_gain", g.heading_gain},
        {"speed_gain", g.speed_gain},
        {"accel_noise", g.accel_noise},
        {"turn_noise", g.turn_noise},
        {"context_noise", g.context_noise},
        {"max_steps", g.max_steps},
        {"train_ratio", data.train_ratio},
        {"val_ratio", data.val_ratio},
        {"test_ratio", data.test_ratio},
    };
    j["window"] = {{"history", window.history},
                   {"future", window.future},
                   {"window_steps", window.window_steps},
                   {"stride", window.stride}};
    j["haq"] = {{"codebook_size", haq.codebook_size},
                {"code_dim", haq.code_dim},
                {"hidden_dims", haq.hidden_dims},
                {"activation", std::string(nn::to_string(haq.activation))},
                {"beta", haq.beta},
                {"epochs", haq.epochs},
                {"batch_size", haq.batch_size},
                {"patience", haq.patience},
                {"learning_rate", haq.learning_rate},
                {"weight_decay", haq.weight_decay}};
    j["diffusion"] = {{"steps", diffusion.steps},
                      {"schedule_offset", diffusion.schedule_offset},
                      {"bits", diffusion.bits},
                      {"time_dim", diffusion.time_dim},
                      {"hidden_dims", diffusion.hidden_dims},
                      {"activation", std::string(nn::to_string(diffusion.activation))},
                      {"epochs", diffusion.epochs},
                      {"batch_size", diffusion.batch_size},
                      {"learning_rate", diffusion.learning_rate},
                      {"weight_decay", diffusion.weight_decay}};
    j["reach"] = {{"speed_buckets", reach.speed_buckets},
                  {"turn_bound", reach.turn_bound},
                  {"accel_bound", reach.accel_bound},
                  {"target_radius", reach.target_radius},
                  {"grid_xy", reach.grid_xy},
                  {"grid_theta", reach.grid_theta},
                  {"grid_margin", reach.grid_margin},
                  {"cfl", reach.cfl},
                  {"temperature", reach.temperature}};
    j["sampling"] = {{"guidance_scale", sampling.guidance_scale},
                     {"bit_beta", sampling.bit_beta},
                     {"samples", sampling.samples},
                     {"horizon", sampling.horizon},
                     {"max_conditions", sampling.max_conditions},
                     {"multimodality_pairs", sampling.multimodality_pairs},
                     {"exhaustive_pairs", sampling.exhaustive_pairs},
                     {"goal_count", sampling.goal_count},
                     {"plots", sampling.plots}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(ErrorKind::validation, "config must be a JSON object");
    check_known(j, {"seed", "threads", "out_dir", "data", "window", "haq", "diffusion", "reach", "sampling"}, "");
    RunConfig c;
    take(j, "seed", c.seed, "");
    take(j, "threads", c.threads, "");
    take(j, "out_dir", c.out_dir, "");

    const json& d = section(j, "data");
    check_known(d, {"n_episodes", "scene", "context_dim", "dt", "reference_speeds", "heading_gain", "speed_gain",
                    "accel_noise", "turn_noise", "context_noise", "max_steps", "train_ratio", "val_ratio",
                    "test_ratio"},
                "data.");
    take(d, "n_episodes", c.data.n_episodes, "data.");
    auto& g = c.data.generator;
    take(d, "context_dim", g.context_dim, "data.");
    take(d, "dt", g.dt, "data.");
    take(d, "reference_speeds", g.reference_speeds, "data.");
    take(d, "heading_gain", g.heading_gain, "data.");
    take(d, "speed_gain", g.speed_gain, "data.");
    take(d, "accel_noise", g.accel_noise, "data.");
    take(d, "turn_noise", g.turn_noise, "data.");
    take(d, "context_noise", g.context_noise, "data.");
    take(d, "max_steps", g.max_steps, "data.");
    take(d, "train_ratio", c.data.train_ratio, "data.");
    take(d, "val_ratio", c.data.val_ratio, "data.");
    take(d, "test_ratio", c.data.test_ratio, "data.");
    const json& s = section(d, "scene");
    check_known(s, {"x_min", "y_min", "x_max", "y_max", "goals", "goal_radius"}, "data.scene.");
    take(s, "x_min", c.data.scene.x_min, "data.scene.");
    take(s, "y_min", c.data.scene.y_min, "data.scene.");
    take(s, "x_max", c.data.scene.x_max, "data.scene.");
    take(s, "y_max", c.data.scene.y_max, "data.scene.");
    take(s, "goal_radius", c.data.scene.goal_radius, "data.scene.");
    if (s.contains("goals")) {
        std::vector<std::array<double, 2>> goals;
        take(s, "goals", goals, "data.scene.");
        c.data.scene.goals.clear();
        for (const auto& p : goals) c.data.scene.goals.push_back({p[0], p[1]});
    }

    const json& w = section(j, "window");
    check_known(w, {"history", "future", "window_steps", "stride"}, "window.");
    take(w, "history", c.window.history, "window.");
    take(w, "future", c.window.future, "window.");
    take(w, "window_steps", c.window.window_steps, "window.");
    take(w, "stride", c.window.stride, "window.");

    const json& h = section(j, "haq");
    check_known(h, {"codebook_size", "code_dim", "hidden_dims", "activation", "beta", "epochs", "batch_size",
                    "patience", "learning_rate", "weight_decay"},
                "haq.");
    take(h, "codebook_size", c.haq.codebook_size, "haq.");
    take(h, "code_dim", c.haq.code_dim, "haq.");
    take(h, "hidden_dims", c.haq.hidden_dims, "haq.");
    take_activation(h, "activation", c.haq.activation, "haq.");
    take(h, "beta", c.haq.beta, "haq.");
    take(h, "epochs", c.haq.epochs, "haq.");
    take(h, "batch_size", c.haq.batch_size, "haq.");
    take(h, "patience", c.haq.patience, "haq.");
    take(h, "learning_rate", c.haq.learning_rate, "haq.");
    take(h, "weight_decay", c.haq.weight_decay, "haq.");

    const json& f = section(j, "diffusion");
    check_known(f, {"steps", "schedule_offset", "bits", "time_dim", "hidden_dims", "activation", "epochs",
                    "batch_size", "learning_rate", "weight_decay"},
                "diffusion.");
    take(f, "steps", c.diffusion.steps, "diffusion.");
    take(f, "schedule_offset", c.diffusion.schedule_offset, "diffusion.");
    take(f, "bits", c.diffusion.bits, "diffusion.");
    take(f, "time_dim", c.diffusion.time_dim, "diffusion.");
    take(f, "hidden_dims", c.diffusion.hidden_dims, "diffusion.");
    take_activation(f, "activation", c.diffusion.activation, "diffusion.");
    take(f, "epochs", c.diffusion.epochs, "diffusion.");
    take(f, "batch_size", c.diffusion.batch_size, "diffusion.");
    take(f, "learning_rate", c.diffusion.learning_rate, "diffusion.");
    take(f, "weight_decay", c.diffusion.weight_decay, "diffusion.");

    const json& r = section(j, "reach");
    check_known(r, {"speed_buckets", "turn_bound", "accel_bound", "target_radius", "grid_xy", "grid_theta",
                    "grid_margin", "cfl", "temperature"},
                "reach.");
    take(r, "speed_buckets", c.reach.speed_buckets, "reach.");
    take(r, "turn_bound", c.reach.turn_bound, "reach.");
    take(r, "accel_bound", c.reach.accel_bound, "reach.");
    take(r, "target_radius", c.reach.target_radius, "reach.");
    take(r, "grid_xy", c.reach.grid_xy, "reach.");
    take(r, "grid_theta", c.reach.grid_theta, "reach.");
    take(r, "grid_margin", c.reach.grid_margin, "reach.");
    take(r, "cfl", c.reach.cfl, "reach.");
    take(r, "temperature", c.reach.temperature, "reach.");

    const json& p = section(j, "sampling");
    check_known(p, {"guidance_scale", "bit_beta", "samples", "horizon", "max_conditions", "multimodality_pairs",
                    "exhaustive_pairs", "goal_count", "plots"},
                "sampling.");
    take(p, "guidance_scale", c.sampling.guidance_scale, "sampling.");
    take(p, "bit_beta", c.sampling.bit_beta, "sampling.");
    take(p, "samples", c.sampling.samples, "sampling.");
    take(p, "horizon", c.sampling.horizon, "sampling.");
    take(p, "max_conditions", c.sampling.max_conditions, "sampling.");
    take(p, "multimodality_pairs", c.sampling.multimodality_pairs, "sampling.");
    take(p, "exhaustive_pairs", c.sampling.exhaustive_pairs, "sampling.");
    take(p, "goal_count", c.sampling.goal_count, "sampling.");
    take(p, "plots", c.sampling.plots, "sampling.");
    // One set of control bounds drives both the generator and the BRS.
    c.data.generator.accel_bound = c.reach.accel_bound;
    c.data.generator.turn_bound = c.reach.turn_bound;
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open config file '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

}  // namespace rdiff
