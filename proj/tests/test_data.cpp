#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "rdiff/data.hpp"
#include "rdiff/haq.hpp"
#include "rdiff/tokens.hpp"

using namespace rdiff;
using namespace rdiff::data;

namespace {

const std::vector<Episode>& corpus() {
    static const std::vector<Episode> eps = generate_dataset(Scene::default_scene(), 120, 2024);
    return eps;
}

Episode straight_episode(int length) {
    Episode e;
    e.id = 3;
    for (int i = 0; i < length; ++i) {
        AgentState s;
        s.x = 0.3 * i;
        s.y = 0.01 * i * i;
        s.v = 0.9;
        s.context.assign(dynamics::kDefaultContextDim, 0.0);
        s.context[0] = 1.0;
        e.states.push_back(s);
        e.goal_index.push_back(0);
    }
    e.controls.resize(static_cast<std::size_t>(length - 1));
    return e;
}

}  // namespace

TEST_CASE("scene validation") {
    Scene s = Scene::default_scene();
    CHECK_NOTHROW(s.validate());
    CHECK(s.goals.size() == 4);
    s.goals.push_back({20.0, 1.0});
    CHECK_THROWS_AS(s.validate(), Error);
    Scene one = Scene::default_scene();
    one.goals.resize(1);
    CHECK_THROWS_AS(one.validate(), Error);
    const Scene back = Scene::from_json(Scene::default_scene().to_json());
    CHECK(back.goals == Scene::default_scene().goals);
    CHECK(back.goal_radius == 0.5);
    CHECK_THROWS_AS(generate_dataset(Scene::default_scene(), 0, 1), Error);
}

TEST_CASE("generator") {
    const auto& eps = corpus();
    SUBCASE("same seed gives identical episodes for any thread count") {
        const auto again = generate_dataset(Scene::default_scene(), 120, 2024, {}, 3);
        REQUIRE(again.size() == eps.size());
        for (std::size_t i = 0; i < eps.size(); ++i) {
            REQUIRE(again[i].states.size() == eps[i].states.size());
            for (std::size_t t = 0; t < eps[i].states.size(); ++t) {
                CHECK(again[i].states[t].x == eps[i].states[t].x);
                CHECK(again[i].states[t].y == eps[i].states[t].y);
                CHECK(again[i].states[t].context == eps[i].states[t].context);
            }
        }
    }
    SUBCASE("controls respect the bounds and states follow the dynamics") {
        for (const Episode& e : eps) {
            REQUIRE(e.controls.size() + 1 == e.states.size());
            for (std::size_t t = 0; t < e.controls.size(); ++t) {
                CHECK(std::abs(e.controls[t].u1) <= 0.5);
                CHECK(std::abs(e.controls[t].u2) <= 1.0);
                const AgentState next = dynamics::step(e.states[t], e.controls[t], dynamics::kDefaultDt);
                CHECK(next.x == doctest::Approx(e.states[t + 1].x).epsilon(1e-12));
                CHECK(next.y == doctest::Approx(e.states[t + 1].y).epsilon(1e-12));
            }
        }
    }
    SUBCASE("recovered speeds and turn rates stay within the bounds") {
        for (const Episode& e : eps) {
            std::vector<Point2> pts;
            for (const auto& s : e.states) pts.push_back(s.position());
            const auto flat = dynamics::recover_flat_state(pts, dynamics::kDefaultDt);
            for (std::size_t t = 0; t < flat.size(); ++t) {
                CHECK(flat[t].v <= 1.5 + 0.1);
                if (t > 0 && flat[t].v > 0.05 && flat[t - 1].v > 0.05) {
                    const double dtheta = std::remainder(flat[t].theta - flat[t - 1].theta, 2.0 * M_PI);
                    CHECK(std::abs(dtheta) / dynamics::kDefaultDt <= 1.0 + 0.05);
                }
            }
        }
    }
    SUBCASE("first two context dims are a unit heading to the goal") {
        for (const Episode& e : eps) {
            for (std::size_t t = 0; t < e.states.size(); ++t) {
                const auto& c = e.states[t].context;
                REQUIRE(c.size() == 50);
                if (e.goal_index[t] < 0) continue;
                CHECK(std::hypot(c[0], c[1]) == doctest::Approx(1.0).epsilon(1e-12));
                for (std::size_t k = 4; k < c.size(); ++k) CHECK(c[k] == 0.0);
            }
        }
    }
    SUBCASE("at least 95% of episodes reach their first goal") {
        const Scene scene = Scene::default_scene();
        int reached = 0;
        for (const Episode& e : eps) {
            REQUIRE(e.goal_index.front() >= 0);
            const Point2 g = scene.goals[static_cast<std::size_t>(e.goal_index.front())];
            bool hit = false;
            for (const auto& s : e.states) hit = hit || dynamics::distance(s.position(), g) <= scene.goal_radius;
            reached += hit ? 1 : 0;
        }
        CHECK(static_cast<double>(reached) / static_cast<double>(eps.size()) >= 0.95);
    }
}

TEST_CASE("episode CSV round trip") {
    const std::vector<Episode> eps(corpus().begin(), corpus().begin() + 5);
    const auto path = std::filesystem::temp_directory_path() / "rdiff_test_episodes.csv";
    write_episodes_csv(path, eps);
    const auto back = read_episodes_csv(path);
    std::filesystem::remove(path);
    REQUIRE(back.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        CHECK(back[i].id == eps[i].id);
        REQUIRE(back[i].states.size() == eps[i].states.size());
        for (std::size_t t = 0; t < eps[i].states.size(); ++t) {
            CHECK(back[i].states[t].x == eps[i].states[t].x);
            CHECK(back[i].states[t].theta == eps[i].states[t].theta);
            CHECK(back[i].states[t].context == eps[i].states[t].context);
            CHECK(back[i].goal_index[t] == eps[i].goal_index[t]);
        }
    }
    CHECK_THROWS_AS(read_episodes_csv("/nonexistent/episodes.csv"), Error);
}

TEST_CASE("windowing") {
    const WindowConfig wc;
    SUBCASE("length 41 gives one window, 40 is skipped") {
        const auto r = window_dataset({straight_episode(41)}, wc);
        CHECK(r.windows.size() == 1);
        CHECK(r.skipped_episodes == 0);
        const auto s = window_dataset({straight_episode(40)}, wc);
        CHECK(s.windows.empty());
        CHECK(s.skipped_episodes == 1);
        const auto t = window_dataset({straight_episode(51)}, wc);
        CHECK(t.windows.size() == 3);
    }
    SUBCASE("stride coverage over a generated corpus") {
        const auto r = window_dataset(corpus(), wc);
        std::size_t expected = 0;
        int skipped = 0;
        for (const Episode& e : corpus()) {
            const int len = static_cast<int>(e.states.size());
            if (len < wc.min_length()) {
                ++skipped;
                continue;
            }
            expected += static_cast<std::size_t>((len - wc.min_length()) / wc.stride + 1);
        }
        CHECK(r.windows.size() == expected);
        CHECK(r.skipped_episodes == skipped);
    }
    SUBCASE("shapes and frame") {
        const auto r = window_dataset(corpus(), wc);
        for (const SampleWindow& w : r.windows) {
            REQUIRE(w.past.size() == 11);
            REQUIRE(w.future.size() == 30);
            REQUIRE(w.token_windows.size() == 6);
            CHECK(w.past.back().x == 0.0);
            CHECK(w.past.back().y == 0.0);
            CHECK(w.condition_vector().size() == 11 * 2 + 11 * 50);
            for (const TokenWindow& tw : w.token_windows) {
                REQUIRE(tw.positions.size() == 6);
                CHECK(tw.positions.front() == Point2{0.0, 0.0});
            }
        }
    }
    SUBCASE("token frames compose back to the global future") {
        const auto r = window_dataset(corpus(), wc);
        double worst = 0.0;
        for (const SampleWindow& w : r.windows) {
            std::vector<Segment> segs;
            for (const TokenWindow& tw : w.token_windows) segs.push_back(tw.positions);
            const auto global = compose_segments(segs, w.frame);
            REQUIRE(global.size() == w.future_global.size());
            for (std::size_t i = 0; i < global.size(); ++i) {
                worst = std::max(worst, dynamics::distance(global[i], w.future_global[i]));
            }
            for (std::size_t i = 0; i < w.future.size(); ++i) {
                worst = std::max(worst, dynamics::distance(dynamics::to_global(w.frame, w.future[i]),
                                                           w.future_global[i]));
            }
        }
        CHECK(worst < 1e-9);
    }
    SUBCASE("tokens from a reloaded checkpoint are identical") {
        haq::HaqConfig hc;
        hc.codebook_size = 32;
        hc.code_dim = 8;
        hc.hidden_dims = {16};
        const haq::Haq model(hc, 4);
        const auto path = std::filesystem::temp_directory_path() / "rdiff_test_window_haq.ckpt";
        model.save(path);
        const haq::Haq back = haq::Haq::load(path);
        std::filesystem::remove(path);
        const auto tws = unique_token_windows(window_dataset(corpus(), wc).windows);
        for (const TokenWindow& tw : tws) CHECK(back.encode(tw) == model.encode(tw));
    }
    SUBCASE("invalid configurations") {
        WindowConfig bad = wc;
        bad.future = 31;
        CHECK_THROWS_AS(bad.validate(), Error);
    }
}

TEST_CASE("split") {
    std::vector<int> ids(100);
    for (int i = 0; i < 100; ++i) ids[static_cast<std::size_t>(i)] = i;
    const Split s = split_episodes(ids, 0.8, 0.05, 0.15, 9);
    CHECK(s.train.size() == 80);
    CHECK(s.val.size() == 5);
    CHECK(s.test.size() == 15);
    const Split again = split_episodes(ids, 0.8, 0.05, 0.15, 9);
    CHECK(again.train == s.train);
    CHECK(again.val == s.val);
    CHECK(again.test == s.test);
    std::set<int> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 100);

    const auto windows = window_dataset(corpus(), WindowConfig{}).windows;
    std::vector<int> eids;
    for (const Episode& e : corpus()) eids.push_back(e.id);
    const Split cs = split_episodes(eids, 0.8, 0.05, 0.15, 1);
    std::set<int> seen;
    for (const auto* part : {&cs.train, &cs.val, &cs.test}) {
        std::set<int> here;
        for (const SampleWindow& w : select(windows, *part)) here.insert(w.episode_id);
        for (int e : here) CHECK(seen.insert(e).second);
    }

    const Split back = Split::from_json(s.to_json());
    CHECK(back.test == s.test);
    CHECK_THROWS_AS(split_episodes({1, 2}, 0.8, 0.05, 0.15, 1), Error);
    CHECK_THROWS_AS(split_episodes(ids, 0.8, 0.1, 0.15, 1), Error);
}
