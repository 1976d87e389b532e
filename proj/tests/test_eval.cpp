#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "rdiff/eval.hpp"

using namespace rdiff;
using namespace rdiff::eval;

namespace {

Trajectory random_trajectory(Rng& rng, int n, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Trajectory t;
    for (int i = 0; i < n; ++i) t.push_back({g(rng), g(rng)});
    return t;
}

Trajectory shifted(const Trajectory& t, double dx, double dy) {
    Trajectory out;
    for (const Point2& p : t) out.push_back({p.x + dx, p.y + dy});
    return out;
}

double oracle_ade(const Trajectory& a, const Trajectory& b) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::sqrt(std::pow(a[i].x - b[i].x, 2) + std::pow(a[i].y - b[i].y, 2));
    return static_cast<double>(s / a.size());
}

class ListDecoder : public TokenDecoder {
public:
    explicit ListDecoder(std::vector<Segment> segs) : segs_(std::move(segs)) {}
    int codebook_size() const override { return static_cast<int>(segs_.size()); }
    int window_steps() const override { return 5; }
    Segment decode(ActionToken t) const override { return segs_.at(static_cast<std::size_t>(t.index)); }

private:
    std::vector<Segment> segs_;
};

Segment straight(double speed) {
    Segment s;
    for (int k = 0; k <= 5; ++k) s.push_back({speed / 3.0 * k, 0.0});
    return s;
}

}  // namespace

TEST_CASE("ADE and FDE") {
    const Trajectory a{{0, 0}, {1, 0}, {2, 0}};
    CHECK(ade(a, a) == 0.0);
    CHECK(fde(a, a) == 0.0);
    CHECK(ade(shifted(a, 1.0, 0.0), a) == 1.0);
    const Trajectory b{{0, 0}, {1, 3}, {2, 4}};
    CHECK(ade(a, b) == doctest::Approx(7.0 / 3.0).epsilon(1e-15));
    CHECK(fde(shifted(a, 0.0, 2.0), a) == 2.0);

    Trajectory c = a;
    c[0] = {50.0, -7.0};
    c[1] = {-3.0, 9.0};
    CHECK(fde(c, a) == 0.0);

    const Trajectory shorter{{0, 0}};
    CHECK_THROWS_AS(ade(a, shorter), Error);
    CHECK_THROWS_AS(fde(Trajectory{}, Trajectory{}), Error);
    CHECK_THROWS_AS(ade(Trajectory{}, Trajectory{}), Error);

    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const Trajectory p = random_trajectory(rng, 30);
        const Trajectory q = random_trajectory(rng, 30);
        CHECK(ade(p, q) == doctest::Approx(oracle_ade(p, q)).epsilon(1e-12));
        CHECK(ade(shifted(p, 4.0, -2.0), shifted(q, 4.0, -2.0)) == doctest::Approx(ade(p, q)).epsilon(1e-12));
        CHECK(fde(shifted(p, 4.0, -2.0), shifted(q, 4.0, -2.0)) == doctest::Approx(fde(p, q)).epsilon(1e-12));
    }
}

TEST_CASE("min over samples") {
    Rng rng(11);
    const Trajectory truth = random_trajectory(rng, 30);
    const std::vector<Trajectory> one{random_trajectory(rng, 30)};
    const MinErrors m1 = min_over_samples(one, truth);
    CHECK(m1.min_ade == ade(one[0], truth));
    CHECK(m1.min_fde == fde(one[0], truth));
    CHECK_THROWS_AS(min_over_samples(std::vector<Trajectory>{}, truth), Error);

    SUBCASE("matches exhaustive recomputation and never grows when a sample is added") {
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<Trajectory> samples;
            for (int i = 0; i < 20; ++i) samples.push_back(random_trajectory(rng, 30));
            double best_ade = INFINITY;
            double best_fde = INFINITY;
            for (const auto& s : samples) {
                best_ade = std::min(best_ade, oracle_ade(s, truth));
                best_fde = std::min(best_fde, std::hypot(s.back().x - truth.back().x, s.back().y - truth.back().y));
            }
            const MinErrors m = min_over_samples(samples, truth);
            CHECK(m.min_ade == doctest::Approx(best_ade).epsilon(1e-12));
            CHECK(m.min_fde == doctest::Approx(best_fde).epsilon(1e-12));
            samples.push_back(random_trajectory(rng, 30));
            const MinErrors more = min_over_samples(samples, truth);
            CHECK(more.min_ade <= m.min_ade);
            CHECK(more.min_fde <= m.min_fde);
        }
    }
}

TEST_CASE("multimodality") {
    Rng rng(5);
    const Trajectory base = random_trajectory(rng, 30);
    const std::vector<Trajectory> same(20, base);
    CHECK(multimodality(same, 1) == 0.0);
    CHECK_THROWS_AS(multimodality(std::vector<Trajectory>{base}, 1), Error);

    SUBCASE("two clusters against an exhaustive-pair oracle") {
        std::vector<Trajectory> samples(10, base);
        for (int i = 0; i < 10; ++i) samples.push_back(shifted(base, 2.0, 0.0));
        double sum = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            for (std::size_t j = i + 1; j < samples.size(); ++j) {
                sum += oracle_ade(samples[i], samples[j]);
                ++n;
            }
        }
        CHECK(multimodality(samples, 1, 20, true) == doctest::Approx(sum / n).epsilon(1e-12));
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            // 20 pairs, each 0 or 2 m.
            const double m = multimodality(samples, seed);
            const double twice = m * 20.0 / 2.0;
            CHECK(std::abs(twice - std::round(twice)) < 1e-9);
            CHECK(m >= 0.0);
            CHECK(m <= 2.0);
        }
    }
    SUBCASE("sampled pairs are distinct and the estimate is unbiased") {
        std::vector<Trajectory> samples;
        for (int i = 0; i < 20; ++i) samples.push_back(random_trajectory(rng, 30));
        const double exact = multimodality(samples, 0, 20, true);
        double mean = 0.0;
        constexpr int kSeeds = 2000;
        for (int s = 0; s < kSeeds; ++s) mean += multimodality(samples, static_cast<std::uint64_t>(s));
        mean /= kSeeds;
        CHECK(mean == doctest::Approx(exact).epsilon(0.01));
        // Fewer pairs than requested: all pairs.
        const std::vector<Trajectory> three(samples.begin(), samples.begin() + 3);
        CHECK(multimodality(three, 9) == doctest::Approx(multimodality(three, 9, 20, true)).epsilon(1e-15));
    }
    SUBCASE("scaling all samples doubles the metric") {
        std::vector<Trajectory> samples;
        for (int i = 0; i < 20; ++i) samples.push_back(random_trajectory(rng, 30));
        std::vector<Trajectory> doubled = samples;
        for (auto& t : doubled) {
            for (auto& p : t) p = {2.0 * p.x, 2.0 * p.y};
        }
        CHECK(multimodality(doubled, 4) == doctest::Approx(2.0 * multimodality(samples, 4)).epsilon(1e-12));
    }
}

TEST_CASE("goal rate") {
    const data::Scene scene = data::Scene::default_scene();
    const Point2 g = scene.goals[0];
    const Trajectory through{{g.x - 2.0, g.y}, {g.x, g.y}, {g.x + 2.0, g.y}};
    const Trajectory away{{6.0, 4.0}, {6.1, 4.0}, {6.2, 4.0}};
    CHECK(goals_reached(through, scene) == 1);
    CHECK(goals_reached(away, scene) == 0);

    std::vector<Trajectory> batch;
    for (int i = 0; i < 7; ++i) batch.push_back(through);
    for (int i = 0; i < 13; ++i) batch.push_back(away);
    CHECK(goal_rate(batch, scene) == doctest::Approx(0.35).epsilon(1e-15));
    CHECK(goal_rate(batch, scene, 2) == 0.0);

    const Trajectory both{scene.goals[0], scene.goals[1]};
    CHECK(goals_reached(both, scene) == 2);

    // Non-decreasing in the radius.
    Rng rng(8);
    std::vector<Trajectory> wander;
    std::uniform_real_distribution<double> ux(0.0, 12.0), uy(0.0, 8.0);
    for (int i = 0; i < 40; ++i) {
        Trajectory t;
        for (int k = 0; k < 10; ++k) t.push_back({ux(rng), uy(rng)});
        wander.push_back(t);
    }
    double last = 0.0;
    for (double r = 0.1; r < 3.0; r += 0.1) {
        data::Scene s = scene;
        s.goal_radius = r;
        const double rate = goal_rate(wander, s);
        CHECK(rate >= last);
        last = rate;
    }
}

TEST_CASE("constant velocity baseline") {
    const Trajectory past{{-2.0, 0.0}, {-1.0, 0.5}, {0.0, 1.0}};
    const Trajectory cv = constant_velocity(past, 4);
    REQUIRE(cv.size() == 4);
    for (int k = 0; k < 4; ++k) {
        CHECK(cv[static_cast<std::size_t>(k)].x == doctest::Approx(1.0 * (k + 1)).epsilon(1e-15));
        CHECK(cv[static_cast<std::size_t>(k)].y == doctest::Approx(1.0 + 0.5 * (k + 1)).epsilon(1e-15));
    }
    const Trajectory still = constant_velocity(Trajectory{{2.0, 3.0}}, 3);
    for (const Point2& p : still) CHECK(p == Point2{2.0, 3.0});
    CHECK_THROWS_AS(constant_velocity(Trajectory{}, 3), Error);
    CHECK_THROWS_AS(constant_velocity(past, 0), Error);
}

TEST_CASE("decode tokens chains segments") {
    ListDecoder dec({straight(0.9), straight(1.5)});
    const std::vector<int> toks{0, 1, 0};
    const Trajectory t = decode_tokens(dec, toks, dynamics::Pose2{1.0, 2.0, M_PI / 2.0});
    REQUIRE(t.size() == 15);
    CHECK(t[4].x == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t[4].y == doctest::Approx(2.0 + 1.5).epsilon(1e-12));
    CHECK(t[9].y == doctest::Approx(2.0 + 1.5 + 2.5).epsilon(1e-12));
    CHECK(t[14].y == doctest::Approx(2.0 + 1.5 + 2.5 + 1.5).epsilon(1e-12));
}

TEST_CASE("feasibility rate") {
    std::vector<reach::ValueFunction> set;
    for (double v : {0.5, 1.0, 1.5}) {
        reach::ReachSpec spec;
        spec.v_max = v;
        set.push_back(reach::solve_brs(spec, reach::Grid3::default_for(spec)));
    }
    ListDecoder dec({straight(0.4), straight(0.9), straight(1.4), straight(3.0)});
    const auto table = reach::build_feasibility_table(dec, set, 0.1, Digest{});
    const std::vector<std::vector<int>> teleport{{3, 3, 3, 3, 3, 3}, {3, 3, 3, 3, 3, 3}};
    CHECK(feasibility_rate(teleport, table) == 0.0);
    const std::vector<std::vector<int>> steady{{1, 1, 1, 1, 1, 1}, {2, 2, 2, 2, 2, 2}};
    CHECK(feasibility_rate(steady, table) == 1.0);
    Rng rng(2);
    std::uniform_int_distribution<int> pick(0, 3);
    for (int t = 0; t < 50; ++t) {
        std::vector<std::vector<int>> mixed(5, std::vector<int>(6));
        for (auto& s : mixed) {
            for (int& x : s) x = pick(rng);
        }
        const double r = feasibility_rate(mixed, table);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
}

TEST_CASE("report aggregation") {
    std::vector<ConditionMetrics> rows(2);
    rows[0].min_ade = 1.0;
    rows[1].min_ade = 3.0;
    rows[0].feasibility_rate = 0.5;
    rows[1].feasibility_rate = 1.0;
    const MetricReport r = aggregate(rows, 20);
    CHECK(r.min_ade == 2.0);
    CHECK(r.feasibility_rate == 0.75);
    CHECK(r.n_conditions == 2);
    CHECK(r.n_samples == 20);
    const MetricReport back = MetricReport::from_json(r.to_json());
    CHECK(back.min_ade == r.min_ade);
    CHECK(back.n_samples == 20);
}
