#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rdiff/pipeline.hpp"

using namespace rdiff;
using namespace rdiff::pipeline;
using json = nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig tiny(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("rdiff_pipeline_" + name);
    fs::remove_all(dir);
    RunConfig c = RunConfig::from_json(R"({
        "seed": 5,
        "data": {"n_episodes": 30},
        "haq": {"codebook_size": 16, "code_dim": 8, "hidden_dims": [16], "epochs": 2, "batch_size": 64},
        "diffusion": {"bits": 4, "hidden_dims": [32], "time_dim": 4, "epochs": 2, "batch_size": 64},
        "reach": {"grid_xy": 41, "grid_theta": 9},
        "sampling": {"max_conditions": 4, "samples": 4, "multimodality_pairs": 5, "plots": 1}
    })");
    c.out_dir = dir.string();
    return c;
}

// One trained tiny run shared by the cases below.
const RunConfig& trained() {
    static const RunConfig cfg = [] {
        RunConfig c = tiny("shared");
        gen_data(c);
        train_haq(c);
        train_diffusion(c);
        compute_brs(c);
        return c;
    }();
    return cfg;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::validation;
}

}  // namespace

TEST_CASE("stages name the first missing artifact") {
    const RunConfig c = tiny("missing");
    for (auto stage : {+[](const RunConfig& x) { train_haq(x); }, +[](const RunConfig& x) { sample(x); },
                       +[](const RunConfig& x) { evaluate(x); }, +[](const RunConfig& x) { ablate_brs(x); }}) {
        try {
            stage(c);
            FAIL("stage ran without inputs");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::state);
            CHECK(std::string(e.what()).find("gen-data") != std::string::npos);
        }
    }
    gen_data(c);
    try {
        train_diffusion(c);
        FAIL("stage ran without a tokenizer");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("train-haq") != std::string::npos);
    }
    fs::remove_all(c.out_dir);
}

TEST_CASE("a single episode cannot be split") {
    RunConfig c = tiny("one");
    c.data.n_episodes = 1;
    CHECK(kind_of([&] { gen_data(c); }) == ErrorKind::validation);
}

TEST_CASE("gen-data is deterministic") {
    RunConfig a = tiny("det_a");
    RunConfig b = tiny("det_b");
    gen_data(a);
    gen_data(b);
    const Paths pa(a.out_dir), pb(b.out_dir);
    CHECK(slurp(pa.episodes()) == slurp(pb.episodes()));
    CHECK(slurp(pa.split()) == slurp(pb.split()));
    const json m = json::parse(slurp(pa.manifest("gen-data")));
    CHECK(m.at("seed") == 5);
    CHECK(m.at("config").at("data").at("n_episodes") == 30);
    fs::remove_all(a.out_dir);
    fs::remove_all(b.out_dir);
}

TEST_CASE("end to end on a tiny run") {
    const RunConfig& cfg = trained();
    const Paths paths(cfg.out_dir);
    for (const fs::path& p : {paths.haq(), paths.tokens(), paths.denoiser(), paths.table(), paths.haq_loss(),
                              paths.diffusion_loss(), paths.codebook_usage()}) {
        CHECK(fs::exists(p));
    }
    std::istringstream tokens(slurp(paths.tokens()));
    std::string header;
    std::getline(tokens, header);
    CHECK(header == "split,episode_id,window_start_index,token_index");

    SUBCASE("compute-brs reuses solved sets and the table") {
        const BrsResult again = compute_brs(cfg);
        CHECK_FALSE(again.table_rebuilt);
        CHECK(again.value_functions.size() == 3);
    }
    SUBCASE("sample and evaluate") {
        const SampleSet set = sample(cfg);
        CHECK(set.tokens.size() == 4);
        for (const auto& c : set.tokens) {
            REQUIRE(c.size() == 4);
            for (const auto& s : c) CHECK(s.size() == 6);
        }
        const SampleSet loaded = SampleSet::load(paths.samples());
        CHECK(loaded.tokens == set.tokens);
        CHECK(loaded.condition_ids == set.condition_ids);

        const Evaluation ev = evaluate(cfg);
        const json report = json::parse(slurp(paths.report()));
        for (const char* key : {"ade", "fde", "min_ade", "min_fde", "multimodality", "goal_rate",
                                "feasibility_rate", "cv_ade", "cv_fde", "n_conditions", "n_samples"}) {
            CHECK(report.contains(key));
        }
        CHECK(report.at("n_conditions") == 4);
        CHECK(report.at("n_samples") == 4);
        CHECK(ev.report.min_ade <= ev.report.ade);

        std::istringstream horizon(slurp(paths.horizon()));
        std::string line;
        int rows = 0;
        std::getline(horizon, line);
        while (std::getline(horizon, line)) rows += line.empty() ? 0 : 1;
        CHECK(rows == 3);
        REQUIRE(ev.horizons.size() == 3);
        CHECK(ev.horizons[0].horizon == 10);
        CHECK(ev.horizons[2].horizon == 30);
        CHECK(fs::exists(paths.plots()));
        CHECK(fs::exists(paths.per_condition()));
    }
    SUBCASE("zero guidance reproduces the unguided report") {
        Workspace ws(cfg);
        const auto ids = ws.condition_ids();
        const SampleSet zero = draw_samples(ws, ids, 4, 0.0, &ws.table(), 77);
        const SampleSet plain = draw_samples(ws, ids, 4, 0.0, nullptr, 77);
        CHECK(zero.tokens == plain.tokens);
        const Evaluation a = evaluate_samples(ws, zero, &ws.table(), 30);
        const Evaluation b = evaluate_samples(ws, plain, &ws.table(), 30);
        CHECK(a.report.to_json() == b.report.to_json());
    }
    SUBCASE("samples are reproducible") {
        Workspace ws(cfg);
        const auto ids = ws.condition_ids();
        CHECK(draw_samples(ws, ids, 3, 1.0, &ws.table(), 9).tokens ==
              draw_samples(ws, ids, 3, 1.0, &ws.table(), 9).tokens);
    }
}

TEST_CASE("resumed diffusion training matches an uninterrupted run") {
    RunConfig resumed = trained();
    resumed.out_dir = (fs::temp_directory_path() / "rdiff_pipeline_resume").string();
    fs::remove_all(resumed.out_dir);
    fs::create_directories(resumed.out_dir);
    const Paths src(trained().out_dir), dst(resumed.out_dir);
    for (const fs::path& p : {src.episodes(), src.scene(), src.split(), src.haq(), src.denoiser(), src.diffusion_loss()}) {
        fs::copy_file(p, dst.root / p.filename());
    }
    resumed.diffusion.epochs = 3;
    StageOptions opt;
    opt.resume = true;
    const DiffusionResult r = train_diffusion(resumed, opt);
    REQUIRE(r.log.size() == 1);
    CHECK(r.log.front().epoch == 3);

    RunConfig fresh = resumed;
    fresh.out_dir = (fs::temp_directory_path() / "rdiff_pipeline_fresh").string();
    fs::remove_all(fresh.out_dir);
    fs::create_directories(fresh.out_dir);
    const Paths fr(fresh.out_dir);
    for (const fs::path& p : {src.episodes(), src.scene(), src.split(), src.haq()}) {
        fs::copy_file(p, fr.root / p.filename());
    }
    train_diffusion(fresh);
    CHECK(slurp(dst.denoiser()) == slurp(fr.denoiser()));
    CHECK(slurp(dst.diffusion_loss()) == slurp(fr.diffusion_loss()));
    const json m = json::parse(slurp(dst.manifest("train-diffusion")));
    CHECK(m.at("summary").at("trained_epochs") == 3);
    fs::remove_all(resumed.out_dir);
    fs::remove_all(fresh.out_dir);
}

TEST_CASE("BRS ablation") {
    RunConfig cfg = trained();
    const AblationResult r = ablate_brs(cfg);
    CHECK(r.rows.size() == 2 * kAblationSeeds);
    REQUIRE(r.summary.size() == 2);
    REQUIRE(r.rows.front().buckets.size() == 1);
    CHECK(r.rows.front().buckets.front() == 1.5);
    CHECK(r.rows.back().buckets.size() == 3);
    CHECK(r.min_ade_band >= 0.0);
    CHECK(fs::exists(Paths(cfg.out_dir).ablation() / "ablation.csv"));
}
