#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rdiff/config.hpp"
#include "rdiff/data.hpp"
#include "rdiff/diffusion.hpp"
#include "rdiff/eval.hpp"
#include "rdiff/haq.hpp"
#include "rdiff/reachability.hpp"

// The end-to-end stages. Every stage reads its inputs from the run directory,
// fails naming the first missing artifact, and writes a manifest recording the
// resolved config and seed next to its outputs.
namespace rdiff::pipeline {

namespace fs = std::filesystem;

struct Paths {
    fs::path root;

    explicit Paths(fs::path dir) : root(std::move(dir)) {}
    fs::path episodes() const { return root / "episodes.csv"; }
    fs::path scene() const { return root / "scene.json"; }
    fs::path split() const { return root / "split.json"; }
    fs::path haq() const { return root / "haq.ckpt"; }
    fs::path haq_loss() const { return root / "haq_loss.csv"; }
    fs::path codebook_usage() const { return root / "codebook_usage.csv"; }
    fs::path tokens() const { return root / "tokens.csv"; }
    fs::path denoiser() const { return root / "denoiser.ckpt"; }
    fs::path diffusion_loss() const { return root / "diffusion_loss.csv"; }
    fs::path value_function(double v_max) const;
    fs::path table() const { return root / "feasibility.rdft"; }
    fs::path samples() const { return root / "samples.csv"; }
    fs::path report() const { return root / "report.json"; }
    fs::path per_condition() const { return root / "per_condition.csv"; }
    fs::path horizon() const { return root / "horizon_ade.csv"; }
    fs::path plots() const { return root / "plots"; }
    fs::path ablation() const { return root / "ablation"; }
    fs::path manifest(const std::string& stage) const { return root / ("manifest_" + stage + ".json"); }
};

using Logger = std::function<void(const std::string&)>;

struct StageOptions {
    bool resume = false;
    Logger log;
};

/// Lazily loaded artifacts of one run directory.
class Workspace {
public:
    explicit Workspace(RunConfig config);

    const RunConfig& config() const { return config_; }
    const Paths& paths() const { return paths_; }

    const std::vector<data::Episode>& episodes();
    const data::Split& split();
    const data::Scene& scene();
    /// Windows of one split ("train", "val" or "test").
    const std::vector<data::SampleWindow>& windows(const std::string& which);
    const haq::Haq& haq();
    const diffusion::Denoiser& denoiser();
    const diffusion::NoiseSchedule& schedule();
    /// Value functions of the given buckets, read from their files.
    std::vector<reach::ValueFunction> value_functions(const std::vector<double>& buckets);
    const reach::FeasibilityTable& table();

    /// Indices into windows("test") used for sampling: all of them, or a
    /// seeded subset of sampling.max_conditions, in ascending order.
    std::vector<int> condition_ids();

    /// Token windows of `w` encoded with the trained HAQ.
    std::vector<int> encode(const data::SampleWindow& w);

private:
    void require(const fs::path& path, const std::string& producer) const;

    RunConfig config_;
    Paths paths_;
    std::optional<std::vector<data::Episode>> episodes_;
    std::optional<data::Split> split_;
    std::optional<data::Scene> scene_;
    std::optional<data::WindowResult> all_windows_;
    std::map<std::string, std::vector<data::SampleWindow>> split_windows_;
    std::optional<haq::Haq> haq_;
    std::optional<diffusion::Denoiser> denoiser_;
    std::optional<diffusion::NoiseSchedule> schedule_;
    std::optional<reach::FeasibilityTable> table_;
};

struct SampleSet {
    double guidance_scale = 0.0;
    std::uint64_t seed = 0;
    std::vector<int> condition_ids;
    /// [condition][sample][token slot]
    std::vector<std::vector<std::vector<int>>> tokens;

    /// Header `condition_id,sample_id,tok_0..tok_{n-1}`, plus the hard
    /// sequence feasibility of each row when a table is given.
    void save(const fs::path& path, const reach::FeasibilityTable* table = nullptr) const;
    static SampleSet load(const fs::path& path);
};

/// Draws `samples` token sequences per condition. Condition c uses the stream
/// derive_seed(seed, c). A zero scale never touches `table`.
SampleSet draw_samples(Workspace& ws, const std::vector<int>& condition_ids, int samples, double guidance_scale,
                       const reach::FeasibilityTable* table, std::uint64_t seed);

struct HorizonRow {
    int horizon = 0;
    double ade = 0.0;
    double fde = 0.0;
    double min_ade = 0.0;
    double min_fde = 0.0;
    double cv_ade = 0.0;
    double cv_fde = 0.0;
};

struct Evaluation {
    eval::MetricReport report;
    std::vector<eval::ConditionMetrics> conditions;
    std::vector<HorizonRow> horizons;  // T = 10, 20, 30 (those within the future length)
};

/// Decodes every sample and scores it against the test windows. Feasibility
/// uses `table` (0 when null).
Evaluation evaluate_samples(Workspace& ws, const SampleSet& set, const reach::FeasibilityTable* table, int horizon);

/// Decoded trajectory of one sample in the condition frame.
eval::Trajectory decode_sample(const haq::Haq& model, const std::vector<int>& tokens);

struct GenDataResult {
    int episodes = 0;
    data::Split split;
    int skipped_episodes = 0;
    double first_goal_rate = 0.0;
};

struct HaqResult {
    haq::TrainResult train;
    double val_error = 0.0;
    double bottom_entropy = 0.0;
    double bottom_used = 0.0;
    double seconds = 0.0;
};

struct DiffusionResult {
    std::vector<diffusion::EpochLog> log;
    double seconds = 0.0;
};

struct BrsResult {
    std::vector<fs::path> value_functions;
    bool table_rebuilt = false;
    double solve_seconds = 0.0;
};

struct AblationRow {
    std::string name;
    std::vector<double> buckets;
    std::uint64_t seed = 0;
    eval::MetricReport report;
};

struct AblationSummary {
    std::string name;
    double min_ade_mean = 0.0;
    double min_ade_std = 0.0;
    double multimodality_mean = 0.0;
    double multimodality_std = 0.0;
    double feasibility_mean = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationSummary> summary;  // one bucket, then the configured buckets
    double min_ade_band = 0.0;
    double multimodality_band = 0.0;
};

/// Ablation seeds: config seed, +1, +2.
constexpr int kAblationSeeds = 3;

GenDataResult gen_data(const RunConfig& config, const StageOptions& options = {});
HaqResult train_haq(const RunConfig& config, const StageOptions& options = {});
DiffusionResult train_diffusion(const RunConfig& config, const StageOptions& options = {});
BrsResult compute_brs(const RunConfig& config, const StageOptions& options = {});
SampleSet sample(const RunConfig& config, const StageOptions& options = {});
Evaluation evaluate(const RunConfig& config, const StageOptions& options = {});
AblationResult ablate_brs(const RunConfig& config, const StageOptions& options = {});

/// Solves (or reuses a matching file for) one bucket.
reach::ValueFunction solve_bucket(const RunConfig& config, double v_max, const Logger& log = {});

/// Minimal SVG overlay: past in one stroke, truth and samples in others.
std::string plot_svg(const data::Scene& scene, const std::vector<dynamics::Point2>& past,
                     const std::vector<dynamics::Point2>& truth,
                     const std::vector<std::vector<dynamics::Point2>>& samples);

}  // namespace rdiff::pipeline
