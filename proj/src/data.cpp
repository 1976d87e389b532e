#include "rdiff/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace rdiff::data {
namespace {

using json = nlohmann::json;

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        fail(ErrorKind::io, "write failed for '" + path.string() + "'");
    }
}

json parse_json(const std::string& text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("malformed ") + what + ": " + e.what());
    }
}

Episode simulate(const Scene& scene, const GeneratorConfig& cfg, int id, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> ux(scene.x_min, scene.x_max);
    std::uniform_real_distribution<double> uy(scene.y_min, scene.y_max);
    std::uniform_real_distribution<double> uth(-kPi, kPi);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Episode ep;
    ep.id = id;
    AgentState s;
    for (;;) {
        s.x = ux(rng);
        s.y = uy(rng);
        bool free = true;
        for (const Point2& g : scene.goals) {
            free = free && dynamics::distance(g, s.position()) > scene.goal_radius;
        }
        if (free) break;
    }
    s.theta = uth(rng);
    std::uniform_int_distribution<std::size_t> pick_speed(0, cfg.reference_speeds.size() - 1);
    const double v_ref = cfg.reference_speeds[pick_speed(rng)];
    s.v = v_ref;

    std::vector<int> order(scene.goals.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<std::size_t> pick_count(1, order.size());
    order.resize(pick_count(rng));

    std::size_t next = 0;
    auto context_for = [&](const AgentState& st, int goal) {
        std::vector<double> c(static_cast<std::size_t>(cfg.context_dim), 0.0);
        double hx = std::cos(st.theta);
        double hy = std::sin(st.theta);
        if (goal >= 0) {
            const Point2 g = scene.goals[static_cast<std::size_t>(goal)];
            const double d = std::hypot(g.x - st.x, g.y - st.y);
            if (d > 1e-12) {
                hx = (g.x - st.x) / d;
                hy = (g.y - st.y) / d;
            }
        }
        c[0] = hx;
        c[1] = hy;
        c[2] = hx + cfg.context_noise * gauss(rng);
        c[3] = hy + cfg.context_noise * gauss(rng);
        return c;
    };
    auto advance_goals = [&](const AgentState& st) {
        while (next < order.size() &&
               dynamics::distance(scene.goals[static_cast<std::size_t>(order[next])], st.position()) <=
                   scene.goal_radius) {
            ep.visited_goals.push_back(order[next]);
            ++next;
        }
    };

    advance_goals(s);
    auto current_goal = [&] { return next < order.size() ? order[next] : -1; };
    s.context = context_for(s, current_goal());
    ep.states.push_back(s);
    ep.goal_index.push_back(current_goal());

    for (int t = 0; t < cfg.max_steps && next < order.size(); ++t) {
        const Point2 g = scene.goals[static_cast<std::size_t>(order[next])];
        const double err = wrap_angle(std::atan2(g.y - s.y, g.x - s.x) - s.theta);
        ControlInput u;
        u.u1 = std::clamp(cfg.speed_gain * (v_ref - s.v) + cfg.accel_noise * gauss(rng), -cfg.accel_bound,
                          cfg.accel_bound);
        u.u2 = std::clamp(cfg.heading_gain * err + cfg.turn_noise * gauss(rng), -cfg.turn_bound, cfg.turn_bound);
        s = dynamics::step(s, u, cfg.dt);
        advance_goals(s);
        s.context = context_for(s, current_goal());
        ep.controls.push_back(u);
        ep.states.push_back(s);
        ep.goal_index.push_back(current_goal());
    }
    return ep;
}

std::string fmt(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        fail(ErrorKind::validation, "bad number '" + std::string(s) + "' at " + where);
    }
    return v;
}

}  // namespace

Scene Scene::default_scene() {
    Scene s;
    s.goals = {{1.0, 1.0}, {11.0, 1.0}, {11.0, 7.0}, {1.0, 7.0}};
    return s;
}

bool Scene::contains(Point2 p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
}

void Scene::validate() const {
    if (!(x_max > x_min) || !(y_max > y_min)) {
        fail(ErrorKind::validation, "scene bounds must have positive extent");
    }
    if (goals.size() < 2) {
        fail(ErrorKind::validation, "scene needs at least 2 goals");
    }
    if (!(goal_radius > 0.0)) {
        fail(ErrorKind::validation, "goal_radius must be positive");
    }
    for (std::size_t i = 0; i < goals.size(); ++i) {
        if (!contains(goals[i])) {
            fail(ErrorKind::validation, "goal " + std::to_string(i) + " lies outside the scene bounds");
        }
    }
}

std::string Scene::to_json() const {
    json j;
    j["bounds"] = {{"x_min", x_min}, {"y_min", y_min}, {"x_max", x_max}, {"y_max", y_max}};
    j["goals"] = json::array();
    for (const Point2& g : goals) j["goals"].push_back({g.x, g.y});
    j["goal_radius"] = goal_radius;
    return j.dump(2) + "\n";
}

Scene Scene::from_json(const std::string& text) {
    const json j = parse_json(text, "scene JSON");
    Scene s;
    try {
        const json& b = j.at("bounds");
        s.x_min = b.at("x_min").get<double>();
        s.y_min = b.at("y_min").get<double>();
        s.x_max = b.at("x_max").get<double>();
        s.y_max = b.at("y_max").get<double>();
        for (const json& g : j.at("goals")) {
            s.goals.push_back({g.at(0).get<double>(), g.at(1).get<double>()});
        }
        s.goal_radius = j.at("goal_radius").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("scene JSON: ") + e.what());
    }
    s.validate();
    return s;
}

void Scene::save(const std::filesystem::path& path) const { write_text(path, to_json()); }

Scene Scene::load(const std::filesystem::path& path) { return from_json(read_text(path)); }

void GeneratorConfig::validate() const {
    if (context_dim < 4) {
        fail(ErrorKind::validation, "context_dim must be at least 4");
    }
    if (!(dt > 0.0) || reference_speeds.empty() || !(accel_bound > 0.0) || !(turn_bound > 0.0) ||
        max_steps < 1 || accel_noise < 0.0 || turn_noise < 0.0 || context_noise < 0.0) {
        fail(ErrorKind::validation, "invalid generator settings");
    }
}

std::vector<Episode> generate_dataset(const Scene& scene, int n_episodes, std::uint64_t seed,
                                      const GeneratorConfig& config, int threads) {
    scene.validate();
    config.validate();
    if (n_episodes < 1) {
        fail(ErrorKind::validation, "n_episodes must be at least 1");
    }
    std::vector<Episode> out(static_cast<std::size_t>(n_episodes));
    parallel_for(out.size(), threads, [&](std::size_t i) {
        out[i] = simulate(scene, config, static_cast<int>(i), derive_seed(seed, 0x65706973ull, i));
    });
    return out;
}

void write_episodes_csv(const std::filesystem::path& path, const std::vector<Episode>& episodes) {
    std::ostringstream out;
    const std::size_t dim = episodes.empty() || episodes[0].states.empty() ? 0 : episodes[0].states[0].context.size();
    out << "episode_id,t,x,y,v,theta";
    for (std::size_t k = 0; k < dim; ++k) out << ",ctx_" << k;
    out << ",goal_idx\n";
    for (const Episode& ep : episodes) {
        for (std::size_t t = 0; t < ep.states.size(); ++t) {
            const AgentState& s = ep.states[t];
            if (s.context.size() != dim) {
                fail(ErrorKind::dimension, "inconsistent context dimension in episode " + std::to_string(ep.id));
            }
            out << ep.id << ',' << t << ',' << fmt(s.x) << ',' << fmt(s.y) << ',' << fmt(s.v) << ',' << fmt(s.theta);
            for (double c : s.context) out << ',' << fmt(c);
            out << ',' << ep.goal_index[t] << '\n';
        }
    }
    write_text(path, out.str());
}

std::vector<Episode> read_episodes_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open episode file '" + path.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) || line.rfind("episode_id,t,x,y,v,theta", 0) != 0) {
        fail(ErrorKind::validation, "episode file '" + path.string() + "' has an unexpected header");
    }
    std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (cols < 7) {
        fail(ErrorKind::validation, "episode file header is too short");
    }
    const std::size_t dim = cols - 7;
    std::vector<Episode> out;
    std::map<int, std::size_t> slot;
    std::vector<std::string_view> fields;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        fields.clear();
        std::size_t pos = 0;
        for (;;) {
            const std::size_t comma = line.find(',', pos);
            fields.emplace_back(line.data() + pos, (comma == std::string::npos ? line.size() : comma) - pos);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        const std::string where = path.filename().string() + ":" + std::to_string(lineno);
        if (fields.size() != cols) {
            fail(ErrorKind::validation, "wrong column count at " + where);
        }
        const int id = static_cast<int>(parse_double(fields[0], where));
        auto [it, inserted] = slot.try_emplace(id, out.size());
        if (inserted) {
            out.emplace_back();
            out.back().id = id;
        }
        Episode& ep = out[it->second];
        const auto t = static_cast<std::size_t>(parse_double(fields[1], where));
        if (t != ep.states.size()) {
            fail(ErrorKind::validation, "non-consecutive time index at " + where);
        }
        AgentState s;
        s.x = parse_double(fields[2], where);
        s.y = parse_double(fields[3], where);
        s.v = parse_double(fields[4], where);
        s.theta = parse_double(fields[5], where);
        s.context.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) s.context[k] = parse_double(fields[6 + k], where);
        ep.states.push_back(std::move(s));
        const int goal = static_cast<int>(parse_double(fields[cols - 1], where));
        ep.goal_index.push_back(goal);
        if (!ep.goal_index.empty() && ep.goal_index.size() >= 2) {
            const int before = ep.goal_index[ep.goal_index.size() - 2];
            if (before >= 0 && before != goal) ep.visited_goals.push_back(before);
        }
    }
    return out;
}

std::vector<double> rotate_context(const std::vector<double>& context, double theta) {
    std::vector<double> c = context;
    for (std::size_t k = 0; k + 1 < 4 && k + 1 < c.size(); k += 2) {
        const Point2 r = dynamics::rotate({c[k], c[k + 1]}, theta);
        c[k] = r.x;
        c[k + 1] = r.y;
    }
    return c;
}

void WindowConfig::validate() const {
    if (history < 1 || future < 1 || window_steps < 1 || stride < 1) {
        fail(ErrorKind::validation, "window lengths must be positive");
    }
    if (future % window_steps != 0) {
        fail(ErrorKind::validation, "future horizon must be divisible by the token window length");
    }
}

std::vector<double> SampleWindow::condition_vector() const {
    std::vector<double> v;
    v.reserve(past.size() * 2 + past_contexts.size());
    for (const Point2& p : past) {
        v.push_back(p.x);
        v.push_back(p.y);
    }
    v.insert(v.end(), past_contexts.begin(), past_contexts.end());
    return v;
}

WindowResult window_dataset(const std::vector<Episode>& episodes, const WindowConfig& config) {
    config.validate();
    WindowResult result;
    const int need = config.min_length();
    for (const Episode& ep : episodes) {
        const int len = static_cast<int>(ep.states.size());
        if (len < need) {
            ++result.skipped_episodes;
            continue;
        }
        std::vector<Point2> pts(ep.states.size());
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = ep.states[i].position();
        for (int start = 0; start + need <= len; start += config.stride) {
            SampleWindow w;
            w.episode_id = ep.id;
            w.current = start + config.history;
            const std::span<const Point2> past_global(pts.data() + start, static_cast<std::size_t>(config.history) + 1);
            const Point2 cur = pts[static_cast<std::size_t>(w.current)];
            w.frame = Pose2{cur.x, cur.y, dynamics::arrival_heading(past_global, 0.0)};
            for (int i = start; i <= w.current; ++i) {
                w.past.push_back(dynamics::to_local(w.frame, pts[static_cast<std::size_t>(i)]));
                const auto c = rotate_context(ep.states[static_cast<std::size_t>(i)].context, w.frame.theta);
                w.past_contexts.insert(w.past_contexts.end(), c.begin(), c.end());
            }
            for (int i = w.current + 1; i <= w.current + config.future; ++i) {
                w.future_global.push_back(pts[static_cast<std::size_t>(i)]);
                w.future.push_back(dynamics::to_local(w.frame, pts[static_cast<std::size_t>(i)]));
            }
            // Chain token frames exactly as compose_segments does.
            Pose2 frame = w.frame;
            for (int m = 0; m < config.tokens_per_sample(); ++m) {
                TokenWindow tw;
                tw.episode_id = ep.id;
                tw.anchor = w.current + m * config.window_steps;
                for (int k = 0; k <= config.window_steps; ++k) {
                    tw.positions.push_back(dynamics::to_local(frame, pts[static_cast<std::size_t>(tw.anchor + k)]));
                }
                for (int k = 1; k <= config.window_steps; ++k) {
                    const auto c = rotate_context(ep.states[static_cast<std::size_t>(tw.anchor + k)].context, frame.theta);
                    tw.contexts.insert(tw.contexts.end(), c.begin(), c.end());
                }
                const Point2 end = pts[static_cast<std::size_t>(tw.anchor + config.window_steps)];
                frame = Pose2{end.x, end.y, wrap_angle(frame.theta + dynamics::arrival_heading(tw.positions, 0.0))};
                w.token_windows.push_back(std::move(tw));
            }
            result.windows.push_back(std::move(w));
        }
    }
    return result;
}

std::vector<TokenWindow> unique_token_windows(const std::vector<SampleWindow>& windows) {
    std::vector<TokenWindow> out;
    std::set<std::pair<int, int>> seen;
    for (const SampleWindow& w : windows) {
        for (const TokenWindow& tw : w.token_windows) {
            if (seen.insert({tw.episode_id, tw.anchor}).second) out.push_back(tw);
        }
    }
    return out;
}

std::string Split::to_json() const {
    json j;
    j["train"] = train;
    j["val"] = val;
    j["test"] = test;
    return j.dump(2) + "\n";
}

Split Split::from_json(const std::string& text) {
    const json j = parse_json(text, "split manifest");
    Split s;
    try {
        s.train = j.at("train").get<std::vector<int>>();
        s.val = j.at("val").get<std::vector<int>>();
        s.test = j.at("test").get<std::vector<int>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("split manifest: ") + e.what());
    }
    return s;
}

Split split_episodes(std::vector<int> episode_ids, double train_ratio, double val_ratio, double test_ratio,
                     std::uint64_t seed) {
    if (train_ratio < 0.0 || val_ratio < 0.0 || test_ratio < 0.0 ||
        std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
        fail(ErrorKind::validation, "split ratios must be non-negative and sum to 1");
    }
    const auto n = static_cast<long>(episode_ids.size());
    if (n < 3) {
        fail(ErrorKind::validation, "need at least 3 episodes to split, got " + std::to_string(n));
    }
    std::sort(episode_ids.begin(), episode_ids.end());
    Rng rng(derive_seed(seed, 0x73706c6974ull));
    std::shuffle(episode_ids.begin(), episode_ids.end(), rng);
    const long n_val = std::max(1L, std::lround(val_ratio * static_cast<double>(n)));
    const long n_test = std::max(1L, std::lround(test_ratio * static_cast<double>(n)));
    if (n - n_val - n_test < 1) {
        fail(ErrorKind::validation, "split leaves no training episodes");
    }
    Split s;
    s.val.assign(episode_ids.begin(), episode_ids.begin() + n_val);
    s.test.assign(episode_ids.begin() + n_val, episode_ids.begin() + n_val + n_test);
    s.train.assign(episode_ids.begin() + n_val + n_test, episode_ids.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

std::vector<SampleWindow> select(const std::vector<SampleWindow>& windows, const std::vector<int>& episode_ids) {
    const std::set<int> keep(episode_ids.begin(), episode_ids.end());
    std::vector<SampleWindow> out;
    for (const SampleWindow& w : windows) {
        if (keep.count(w.episode_id)) out.push_back(w);
    }
    return out;
}

}  // namespace rdiff::data
