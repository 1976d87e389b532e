#include "rdiff/eval.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace rdiff::eval {

double ade(std::span<const Point2> pred, std::span<const Point2> truth) {
    if (pred.size() != truth.size()) {
        fail(ErrorKind::dimension, "ADE length mismatch: " + std::to_string(pred.size()) + " vs " +
                                       std::to_string(truth.size()));
    }
    if (pred.empty()) {
        fail(ErrorKind::validation, "ADE of empty trajectories");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += dynamics::distance(pred[i], truth[i]);
    return sum / static_cast<double>(pred.size());
}

double fde(std::span<const Point2> pred, std::span<const Point2> truth) {
    if (pred.empty() || truth.empty()) {
        fail(ErrorKind::validation, "FDE of empty trajectories");
    }
    if (pred.size() != truth.size()) {
        fail(ErrorKind::dimension, "FDE length mismatch");
    }
    return dynamics::distance(pred.back(), truth.back());
}

MinErrors min_over_samples(std::span<const Trajectory> samples, std::span<const Point2> truth) {
    if (samples.empty()) {
        fail(ErrorKind::validation, "min over samples needs at least one sample");
    }
    MinErrors m{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    for (const Trajectory& s : samples) {
        m.min_ade = std::min(m.min_ade, ade(s, truth));
        m.min_fde = std::min(m.min_fde, fde(s, truth));
    }
    return m;
}

double multimodality(std::span<const Trajectory> samples, std::uint64_t seed, int pairs, bool exhaustive) {
    const std::size_t n = samples.size();
    if (n < 2) {
        fail(ErrorKind::validation, "multimodality needs at least two samples");
    }
    if (pairs < 1) {
        fail(ErrorKind::validation, "multimodality pair count must be positive");
    }
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) all.emplace_back(i, j);
    }
    std::size_t use = all.size();
    if (!exhaustive && static_cast<std::size_t>(pairs) < all.size()) {
        // Partial Fisher-Yates: the first `pairs` entries are a uniform draw.
        Rng rng(seed);
        for (std::size_t k = 0; k < static_cast<std::size_t>(pairs); ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, all.size() - 1);
            std::swap(all[k], all[pick(rng)]);
        }
        use = static_cast<std::size_t>(pairs);
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < use; ++k) sum += ade(samples[all[k].first], samples[all[k].second]);
    return sum / static_cast<double>(use);
}

int goals_reached(std::span<const Point2> trajectory, const data::Scene& scene) {
    int count = 0;
    for (const Point2& g : scene.goals) {
        const bool hit = std::any_of(trajectory.begin(), trajectory.end(),
                                     [&](const Point2& p) { return dynamics::distance(p, g) <= scene.goal_radius; });
        count += hit ? 1 : 0;
    }
    return count;
}

double goal_rate(std::span<const Trajectory> samples, const data::Scene& scene, int m) {
    if (samples.empty()) {
        fail(ErrorKind::validation, "goal rate needs at least one sample");
    }
    const auto hits = std::count_if(samples.begin(), samples.end(),
                                    [&](const Trajectory& t) { return goals_reached(t, scene) >= m; });
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double feasibility_rate(std::span<const std::vector<int>> token_samples, const reach::FeasibilityTable& table) {
    if (token_samples.empty()) {
        fail(ErrorKind::validation, "feasibility rate needs at least one sample");
    }
    double sum = 0.0;
    for (const auto& seq : token_samples) {
        std::vector<ActionToken> tokens;
        for (int t : seq) {
            if (t < 0 || t >= table.size()) fail(ErrorKind::validation, "token outside the feasibility table");
            tokens.push_back(ActionToken{t});
        }
        sum += reach::sequence_feasibility(tokens, table, true);
    }
    return sum / static_cast<double>(token_samples.size());
}

Trajectory decode_tokens(const TokenDecoder& decoder, std::span<const int> tokens, dynamics::Pose2 start) {
    std::vector<Segment> segs;
    for (int t : tokens) segs.push_back(decoder.decode(ActionToken{t}));
    return compose_segments(segs, start);
}

Trajectory constant_velocity(std::span<const Point2> past, int horizon) {
    if (past.empty() || horizon < 1) {
        fail(ErrorKind::validation, "constant-velocity baseline needs history and a positive horizon");
    }
    const Point2 last = past.back();
    Point2 d{0.0, 0.0};
    if (past.size() >= 2) d = {last.x - past[past.size() - 2].x, last.y - past[past.size() - 2].y};
    Trajectory out;
    for (int k = 1; k <= horizon; ++k) out.push_back({last.x + k * d.x, last.y + k * d.y});
    return out;
}

MetricReport aggregate(std::span<const ConditionMetrics> rows, int samples_per_condition) {
    MetricReport r;
    r.n_conditions = static_cast<int>(rows.size());
    r.n_samples = samples_per_condition;
    if (rows.empty()) return r;
    for (const ConditionMetrics& c : rows) {
        r.ade += c.mean_ade;
        r.fde += c.mean_fde;
        r.min_ade += c.min_ade;
        r.min_fde += c.min_fde;
        r.multimodality += c.multimodality;
        r.goal_rate += c.goal_rate;
        r.feasibility_rate += c.feasibility_rate;
        r.cv_ade += c.cv_ade;
        r.cv_fde += c.cv_fde;
    }
    const double n = static_cast<double>(rows.size());
    for (double* v : {&r.ade, &r.fde, &r.min_ade, &r.min_fde, &r.multimodality, &r.goal_rate, &r.feasibility_rate,
                      &r.cv_ade, &r.cv_fde}) {
        *v /= n;
    }
    return r;
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["ade"] = ade;
    j["fde"] = fde;
    j["min_ade"] = min_ade;
    j["min_fde"] = min_fde;
    j["multimodality"] = multimodality;
    j["goal_rate"] = goal_rate;
    j["feasibility_rate"] = feasibility_rate;
    j["cv_ade"] = cv_ade;
    j["cv_fde"] = cv_fde;
    j["n_conditions"] = n_conditions;
    j["n_samples"] = n_samples;
    return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
    MetricReport r;
    try {
        const auto j = nlohmann::json::parse(text);
        r.ade = j.at("ade").get<double>();
        r.fde = j.at("fde").get<double>();
        r.min_ade = j.at("min_ade").get<double>();
        r.min_fde = j.at("min_fde").get<double>();
        r.multimodality = j.at("multimodality").get<double>();
        r.goal_rate = j.at("goal_rate").get<double>();
        r.feasibility_rate = j.at("feasibility_rate").get<double>();
        r.cv_ade = j.at("cv_ade").get<double>();
        r.cv_fde = j.at("cv_fde").get<double>();
        r.n_conditions = j.at("n_conditions").get<int>();
        r.n_samples = j.at("n_samples").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::validation, std::string("metric report: ") + e.what());
    }
    return r;
}

}  // namespace rdiff::eval
