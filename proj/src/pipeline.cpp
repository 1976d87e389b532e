#include "rdiff/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace rdiff::pipeline {
namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Checks the outputs of earlier stages in pipeline order, so the error names
// the first stage still to run.
void require_stages(const Paths& paths, std::initializer_list<const char*> stages) {
    for (const std::string stage : stages) {
        std::vector<fs::path> files;
        if (stage == "gen-data") files = {paths.episodes(), paths.scene(), paths.split()};
        else if (stage == "train-haq") files = {paths.haq()};
        else if (stage == "train-diffusion") files = {paths.denoiser()};
        else if (stage == "compute-brs") files = {paths.table()};
        else if (stage == "sample") files = {paths.samples()};
        for (const auto& f : files) {
            if (!fs::exists(f)) {
                fail(ErrorKind::state, "missing artifact '" + f.string() + "'; run `" + stage + "` first");
            }
        }
    }
}

void say(const Logger& log, const std::string& msg) {
    if (log) log(msg);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write '" + path.string() + "'");
    out << text;
    if (!out) fail(ErrorKind::io, "write failed for '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        fail(ErrorKind::io, "cannot create output directory '" + dir.string() + "'");
    }
}

std::string hex(const Digest& d) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (std::uint8_t b : d) {
        s.push_back(digits[b >> 4u]);
        s.push_back(digits[b & 15u]);
    }
    return s;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    const std::string s = read_text(path);
    return {s.begin(), s.end()};
}

std::string file_digest(const fs::path& path) {
    const auto bytes = read_bytes(path);
    return hex(sha256(bytes));
}

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

void write_manifest(const Paths& paths, const std::string& stage, const RunConfig& cfg,
                    const std::vector<fs::path>& outputs, const json& extra = json::object()) {
    json j;
    j["stage"] = stage;
    j["seed"] = cfg.seed;
    j["config"] = json::parse(cfg.to_json());
    json outs = json::array();
    for (const fs::path& p : outputs) {
        outs.push_back({{"path", fs::relative(p, paths.root).generic_string()}, {"sha256", file_digest(p)}});
    }
    j["outputs"] = outs;
    j["summary"] = extra;
    write_text(paths.manifest(stage), j.dump(2) + "\n");
}

haq::HaqConfig haq_config(const RunConfig& c) {
    haq::HaqConfig h;
    h.window_steps = c.window.window_steps;
    h.context_dim = c.data.generator.context_dim;
    h.codebook_size = c.haq.codebook_size;
    h.code_dim = c.haq.code_dim;
    h.hidden_dims = c.haq.hidden_dims;
    h.activation = c.haq.activation;
    h.beta = c.haq.beta;
    return h;
}

diffusion::DenoiserConfig denoiser_config(const RunConfig& c) {
    diffusion::DenoiserConfig d;
    d.condition_dim = (c.window.history + 1) * (2 + c.data.generator.context_dim);
    d.tokens = c.window.tokens_per_sample();
    d.bits = c.diffusion.bits;
    d.time_dim = c.diffusion.time_dim;
    d.hidden_dims = c.diffusion.hidden_dims;
    d.activation = c.diffusion.activation;
    return d;
}

reach::ReachSpec reach_spec(const RunConfig& c, double v_max) {
    reach::ReachSpec s;
    s.v_max = v_max;
    s.turn_bound = c.reach.turn_bound;
    s.accel_bound = c.reach.accel_bound;
    s.horizon = c.token_horizon();
    s.target_radius = c.reach.target_radius;
    return s;
}

bool same_spec(const reach::ReachSpec& a, const reach::ReachSpec& b) {
    return a.v_max == b.v_max && a.turn_bound == b.turn_bound && a.accel_bound == b.accel_bound &&
           a.horizon == b.horizon && a.target_radius == b.target_radius;
}

bool same_axis(const reach::Axis& a, const reach::Axis& b) {
    return a.lo == b.lo && a.hi == b.hi && a.n == b.n && a.periodic == b.periodic;
}

std::vector<int> episode_ids(const std::vector<data::Episode>& eps) {
    std::vector<int> ids;
    for (const auto& e : eps) ids.push_back(e.id);
    return ids;
}

/// Loss-log rows kept across a resume: those up to `last_epoch`.
std::vector<std::string> kept_rows(const fs::path& path, int last_epoch) {
    std::vector<std::string> rows;
    std::ifstream in(path);
    std::string line;
    if (!in || !std::getline(in, line)) return rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        int epoch = 0;
        std::from_chars(line.data(), line.data() + line.size(), epoch);
        if (epoch <= last_epoch) rows.push_back(line);
    }
    return rows;
}

std::vector<dynamics::Point2> to_global(const dynamics::Pose2& frame, const std::vector<dynamics::Point2>& pts) {
    std::vector<dynamics::Point2> out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(dynamics::to_global(frame, p));
    return out;
}

std::vector<dynamics::Point2> head(const std::vector<dynamics::Point2>& pts, int n) {
    return {pts.begin(), pts.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(pts.size()))};
}

std::vector<int> eval_horizons(int future) {
    std::vector<int> hs;
    for (int h : {10, 20, 30}) {
        if (h <= future) hs.push_back(h);
    }
    return hs;
}

}  // namespace

fs::path Paths::value_function(double v_max) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "vf_v%.3f.rdvf", v_max);
    return root / buf;
}

// ---------------------------------------------------------------- Workspace

Workspace::Workspace(RunConfig config) : config_(std::move(config)), paths_(config_.out_dir) {
    config_.validate();
}

void Workspace::require(const fs::path& path, const std::string& producer) const {
    if (!fs::exists(path)) {
        fail(ErrorKind::state, "missing artifact '" + path.string() + "'; run `" + producer + "` first");
    }
}

const std::vector<data::Episode>& Workspace::episodes() {
    if (!episodes_) {
        require(paths_.episodes(), "gen-data");
        episodes_ = data::read_episodes_csv(paths_.episodes());
    }
    return *episodes_;
}

const data::Split& Workspace::split() {
    if (!split_) {
        require(paths_.split(), "gen-data");
        split_ = data::Split::from_json(read_text(paths_.split()));
    }
    return *split_;
}

const data::Scene& Workspace::scene() {
    if (!scene_) {
        require(paths_.scene(), "gen-data");
        scene_ = data::Scene::load(paths_.scene());
    }
    return *scene_;
}

const std::vector<data::SampleWindow>& Workspace::windows(const std::string& which) {
    if (auto it = split_windows_.find(which); it != split_windows_.end()) return it->second;
    const std::vector<int>* ids = nullptr;
    if (which == "train") ids = &split().train;
    else if (which == "val") ids = &split().val;
    else if (which == "test") ids = &split().test;
    else fail(ErrorKind::validation, "unknown split '" + which + "'");
    if (!all_windows_) all_windows_ = data::window_dataset(episodes(), config_.window);
    return split_windows_.emplace(which, data::select(all_windows_->windows, *ids)).first->second;
}

const haq::Haq& Workspace::haq() {
    if (!haq_) {
        require(paths_.haq(), "train-haq");
        haq_ = haq::Haq::load(paths_.haq());
        if (haq_->trained_epochs() < 1 || !haq_->codebooks_initialized()) {
            fail(ErrorKind::state, "HAQ checkpoint '" + paths_.haq().string() + "' is untrained; run `train-haq`");
        }
    }
    return *haq_;
}

const diffusion::Denoiser& Workspace::denoiser() {
    if (!denoiser_) {
        require(paths_.denoiser(), "train-diffusion");
        denoiser_ = diffusion::Denoiser::load(paths_.denoiser());
    }
    return *denoiser_;
}

const diffusion::NoiseSchedule& Workspace::schedule() {
    if (!schedule_) schedule_ = diffusion::cosine_schedule(config_.diffusion.steps, config_.diffusion.schedule_offset);
    return *schedule_;
}

std::vector<reach::ValueFunction> Workspace::value_functions(const std::vector<double>& buckets) {
    std::vector<reach::ValueFunction> out;
    for (double v : buckets) {
        require(paths_.value_function(v), "compute-brs");
        out.push_back(reach::ValueFunction::load(paths_.value_function(v)));
    }
    return out;
}

const reach::FeasibilityTable& Workspace::table() {
    if (!table_) {
        require(paths_.table(), "compute-brs");
        table_ = reach::FeasibilityTable::load(paths_.table(), config_.reach.temperature);
        if (table_->size() != config_.haq.codebook_size) {
            fail(ErrorKind::state, "feasibility table size does not match the codebook; rerun `compute-brs`");
        }
    }
    return *table_;
}

std::vector<int> Workspace::condition_ids() {
    const int n = static_cast<int>(windows("test").size());
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    const int cap = config_.sampling.max_conditions;
    if (cap > 0 && cap < n) {
        Rng rng(derive_seed(config_.seed, 0x636f6e64ull));
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(static_cast<std::size_t>(cap));
        std::sort(ids.begin(), ids.end());
    }
    return ids;
}

std::vector<int> Workspace::encode(const data::SampleWindow& w) {
    std::vector<int> t;
    for (const auto& tw : w.token_windows) t.push_back(haq().encode(tw).index);
    return t;
}

// ---------------------------------------------------------------- samples

void SampleSet::save(const fs::path& path, const reach::FeasibilityTable* table) const {
    std::ostringstream out;
    const std::size_t slots = tokens.empty() || tokens.front().empty() ? 0 : tokens.front().front().size();
    out << "condition_id,sample_id";
    for (std::size_t s = 0; s < slots; ++s) out << ",tok_" << s;
    if (table) out << ",feasibility";
    out << '\n';
    for (std::size_t c = 0; c < condition_ids.size(); ++c) {
        for (std::size_t i = 0; i < tokens[c].size(); ++i) {
            out << condition_ids[c] << ',' << i;
            for (int t : tokens[c][i]) out << ',' << t;
            if (table) {
                std::vector<ActionToken> seq;
                for (int t : tokens[c][i]) seq.push_back(ActionToken{t});
                out << ',' << num(reach::sequence_feasibility(seq, *table, true));
            }
            out << '\n';
        }
    }
    write_text(path, out.str());
}

SampleSet SampleSet::load(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("condition_id,sample_id", 0) != 0) {
        fail(ErrorKind::io, "'" + path.string() + "' is not a samples file");
    }
    std::size_t slots = 0;
    for (std::size_t pos = line.find(",tok_"); pos != std::string::npos; pos = line.find(",tok_", pos + 1)) ++slots;
    if (slots == 0) fail(ErrorKind::io, "'" + path.string() + "' has no token columns");
    SampleSet set;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        std::vector<int> fields;
        const char* p = line.data();
        const char* end = p + line.size();
        while (p < end && fields.size() < slots + 2) {
            int v = 0;
            const auto r = std::from_chars(p, end, v);
            if (r.ec != std::errc()) fail(ErrorKind::io, where + ": bad integer");
            fields.push_back(v);
            p = r.ptr;
            if (p < end) {
                if (*p != ',') fail(ErrorKind::io, where + ": expected ','");
                ++p;
            }
        }
        if (fields.size() != slots + 2) fail(ErrorKind::io, where + ": expected " + std::to_string(slots + 2) + " integer fields");
        if (set.condition_ids.empty() || set.condition_ids.back() != fields[0]) {
            set.condition_ids.push_back(fields[0]);
            set.tokens.emplace_back();
        }
        set.tokens.back().emplace_back(fields.begin() + 2, fields.end());
    }
    return set;
}

SampleSet draw_samples(Workspace& ws, const std::vector<int>& condition_ids, int samples, double guidance_scale,
                       const reach::FeasibilityTable* table, std::uint64_t seed) {
    const auto& test = ws.windows("test");
    const auto& model = ws.denoiser();
    const auto& sched = ws.schedule();
    diffusion::Guidance g;
    g.scale = guidance_scale;
    g.bit_beta = ws.config().sampling.bit_beta;
    g.table = guidance_scale > 0.0 ? table : nullptr;
    SampleSet set;
    set.guidance_scale = guidance_scale;
    set.seed = seed;
    set.condition_ids = condition_ids;
    set.tokens.resize(condition_ids.size());
    for (int id : condition_ids) {
        if (id < 0 || id >= static_cast<int>(test.size())) {
            fail(ErrorKind::validation, "condition id " + std::to_string(id) + " is out of range");
        }
    }
    parallel_for(condition_ids.size(), ws.config().threads, [&](std::size_t c) {
        const auto& w = test[static_cast<std::size_t>(condition_ids[c])];
        const std::vector<double> cond = w.condition_vector();
        set.tokens[c] = diffusion::sample(model, sched, cond, samples,
                                          derive_seed(seed, static_cast<std::uint64_t>(condition_ids[c])), g);
    });
    return set;
}

eval::Trajectory decode_sample(const haq::Haq& model, const std::vector<int>& tokens) {
    return eval::decode_tokens(model, tokens, dynamics::Pose2{});
}

Evaluation evaluate_samples(Workspace& ws, const SampleSet& set, const reach::FeasibilityTable* table, int horizon) {
    const RunConfig& cfg = ws.config();
    const auto& test = ws.windows("test");
    const auto& model = ws.haq();
    const auto& scene = ws.scene();
    const std::vector<int> hs = eval_horizons(cfg.window.future);
    if (set.condition_ids.empty()) fail(ErrorKind::validation, "no samples to evaluate");
    if (horizon < 1 || horizon > cfg.window.future) {
        fail(ErrorKind::validation, "horizon must be in [1, " + std::to_string(cfg.window.future) + "]");
    }

    const std::size_t n = set.condition_ids.size();
    Evaluation ev;
    ev.conditions.resize(n);
    std::vector<std::vector<HorizonRow>> per_h(n, std::vector<HorizonRow>(hs.size()));
    parallel_for(n, cfg.threads, [&](std::size_t c) {
        const int id = set.condition_ids[c];
        if (id < 0 || id >= static_cast<int>(test.size())) {
            fail(ErrorKind::validation, "condition id " + std::to_string(id) + " is out of range");
        }
        const auto& w = test[static_cast<std::size_t>(id)];
        std::vector<eval::Trajectory> decoded;
        for (const auto& seq : set.tokens[c]) {
            if (static_cast<int>(seq.size()) != cfg.window.tokens_per_sample()) {
                fail(ErrorKind::validation, "sample has " + std::to_string(seq.size()) + " tokens, expected " +
                                                std::to_string(cfg.window.tokens_per_sample()));
            }
            decoded.push_back(decode_sample(model, seq));
        }
        auto metrics_at = [&](int h, eval::ConditionMetrics& m) {
            const auto truth = head(w.future, h);
            std::vector<eval::Trajectory> cut;
            for (const auto& d : decoded) cut.push_back(head(d, h));
            double sa = 0.0, sf = 0.0;
            for (const auto& s : cut) {
                sa += eval::ade(s, truth);
                sf += eval::fde(s, truth);
            }
            m.mean_ade = sa / static_cast<double>(cut.size());
            m.mean_fde = sf / static_cast<double>(cut.size());
            const auto mins = eval::min_over_samples(cut, truth);
            m.min_ade = mins.min_ade;
            m.min_fde = mins.min_fde;
            const auto cv = eval::constant_velocity(w.past, h);
            m.cv_ade = eval::ade(cv, truth);
            m.cv_fde = eval::fde(cv, truth);
            return cut;
        };
        for (std::size_t k = 0; k < hs.size(); ++k) {
            eval::ConditionMetrics m;
            metrics_at(hs[k], m);
            per_h[c][k] = HorizonRow{hs[k], m.mean_ade, m.mean_fde, m.min_ade, m.min_fde, m.cv_ade, m.cv_fde};
        }
        eval::ConditionMetrics& m = ev.conditions[c];
        m.condition_id = id;
        m.episode_id = w.episode_id;
        const auto cut = metrics_at(horizon, m);
        m.multimodality = eval::multimodality(cut, derive_seed(cfg.seed, static_cast<std::uint64_t>(id)),
                                              cfg.sampling.multimodality_pairs, cfg.sampling.exhaustive_pairs);
        std::vector<eval::Trajectory> global;
        for (const auto& s : cut) global.push_back(to_global(w.frame, s));
        m.goal_rate = eval::goal_rate(global, scene, cfg.sampling.goal_count);
        m.feasibility_rate = table ? eval::feasibility_rate(set.tokens[c], *table) : 0.0;
    });
    ev.report = eval::aggregate(ev.conditions, static_cast<int>(set.tokens.front().size()));
    for (std::size_t k = 0; k < hs.size(); ++k) {
        HorizonRow r;
        r.horizon = hs[k];
        for (std::size_t c = 0; c < n; ++c) {
            r.ade += per_h[c][k].ade;
            r.fde += per_h[c][k].fde;
            r.min_ade += per_h[c][k].min_ade;
            r.min_fde += per_h[c][k].min_fde;
            r.cv_ade += per_h[c][k].cv_ade;
            r.cv_fde += per_h[c][k].cv_fde;
        }
        const double d = static_cast<double>(n);
        r.ade /= d;
        r.fde /= d;
        r.min_ade /= d;
        r.min_fde /= d;
        r.cv_ade /= d;
        r.cv_fde /= d;
        ev.horizons.push_back(r);
    }
    return ev;
}

// ---------------------------------------------------------------- stages

GenDataResult gen_data(const RunConfig& cfg, const StageOptions& opt) {
    cfg.validate();
    const Paths paths(cfg.out_dir);
    const auto eps =
        data::generate_dataset(cfg.data.scene, cfg.data.n_episodes, cfg.seed, cfg.data.generator, cfg.threads);
    GenDataResult r;
    r.episodes = static_cast<int>(eps.size());
    r.split = data::split_episodes(episode_ids(eps), cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio,
                                   derive_seed(cfg.seed, 0x73706c74ull));
    r.skipped_episodes = data::window_dataset(eps, cfg.window).skipped_episodes;
    r.first_goal_rate = static_cast<double>(std::count_if(eps.begin(), eps.end(), [](const data::Episode& e) {
                            return !e.visited_goals.empty();
                        })) /
                        static_cast<double>(eps.size());
    ensure_dir(paths.root);
    data::write_episodes_csv(paths.episodes(), eps);
    cfg.data.scene.save(paths.scene());
    write_text(paths.split(), r.split.to_json());
    write_manifest(paths, "gen-data", cfg, {paths.episodes(), paths.scene(), paths.split()},
                   {{"episodes", r.episodes},
                    {"train_episodes", r.split.train.size()},
                    {"val_episodes", r.split.val.size()},
                    {"test_episodes", r.split.test.size()},
                    {"skipped_episodes", r.skipped_episodes},
                    {"first_goal_rate", r.first_goal_rate}});
    say(opt.log, "gen-data: " + std::to_string(r.episodes) + " episodes (" + std::to_string(r.split.train.size()) +
                     "/" + std::to_string(r.split.val.size()) + "/" + std::to_string(r.split.test.size()) + ")");
    return r;
}

HaqResult train_haq(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    const auto train = data::unique_token_windows(ws.windows("train"));
    const auto val = data::unique_token_windows(ws.windows("val"));
    if (train.empty()) fail(ErrorKind::validation, "no training windows; episodes are shorter than history + future + 1");

    haq::Haq model;
    std::optional<nn::Checkpoint> resumed;
    if (opt.resume && fs::exists(paths.haq())) {
        resumed = nn::Checkpoint::load(paths.haq());
        model = haq::Haq::from_checkpoint(*resumed);
        say(opt.log, "train-haq: resuming after epoch " + std::to_string(model.trained_epochs()));
    } else {
        model = haq::Haq(haq_config(cfg), derive_seed(cfg.seed, 0x68617121ull));
    }
    nn::AdamW adam(nn::AdamWConfig{cfg.haq.learning_rate, 0.9, 0.999, cfg.haq.weight_decay, 1e-8}, model.parameters());
    if (resumed && resumed->find("opt.step")) nn::load_optimizer(*resumed, "opt", adam);

    haq::TrainConfig tc;
    tc.epochs = std::max(0, cfg.haq.epochs - model.trained_epochs());
    tc.batch_size = cfg.haq.batch_size;
    tc.patience = cfg.haq.patience;
    tc.optimizer = adam.config();
    tc.seed = derive_seed(cfg.seed, 0x68617174ull);

    std::vector<std::string> rows = resumed ? kept_rows(paths.haq_loss(), model.trained_epochs()) : std::vector<std::string>{};
    const auto t0 = Clock::now();
    HaqResult r;
    r.train = haq::train_haq(model, adam, train, val, tc, [&](const haq::EpochLog& l) {
        rows.push_back(std::to_string(l.epoch) + "," + num(l.train_loss) + "," + num(l.train_reconstruction) + "," +
                       num(l.val_loss) + "," + num(l.val_error) + "," + num(l.top_used) + "," + num(l.bottom_used) +
                       "," + std::to_string(l.reinitialized));
        say(opt.log, "train-haq: epoch " + std::to_string(l.epoch) + " val error " + num(l.val_error) + " m");
    });
    r.seconds = seconds_since(t0);

    // Usage over the training set with the kept weights.
    haq::Codebook& bottom = model.codebook(haq::Level::bottom);
    std::fill(bottom.usage.begin(), bottom.usage.end(), 0);
    const auto codes = model.encode_batch(haq::make_batch(train, model.config()));
    for (int c : codes) ++bottom.usage[static_cast<std::size_t>(c)];
    haq::Codebook& top = model.codebook(haq::Level::top);
    std::fill(top.usage.begin(), top.usage.end(), 0);
    {
        const auto b = haq::make_batch(train, model.config());
        for (int c : haq::quantize_rows(model.top_embeddings(b.contexts), top.entries.value)) {
            ++top.usage[static_cast<std::size_t>(c)];
        }
    }
    r.val_error = model.reconstruction_error(val.empty() ? train : val);
    r.bottom_entropy = bottom.usage_entropy();
    r.bottom_used = bottom.used_fraction();

    ensure_dir(paths.root);
    nn::Checkpoint ck = model.to_checkpoint();
    nn::save_optimizer(ck, "opt", adam);
    ck.save(paths.haq());

    std::string loss = "epoch,train_loss,train_reconstruction,val_loss,val_error_m,top_used,bottom_used,reinitialized\n";
    for (const auto& row : rows) loss += row + "\n";
    write_text(paths.haq_loss(), loss);

    std::string usage = "level,index,count\n";
    for (std::size_t j = 0; j < top.usage.size(); ++j) usage += "top," + std::to_string(j) + "," + std::to_string(top.usage[j]) + "\n";
    for (std::size_t j = 0; j < bottom.usage.size(); ++j) {
        usage += "bottom," + std::to_string(j) + "," + std::to_string(bottom.usage[j]) + "\n";
    }
    write_text(paths.codebook_usage(), usage);

    // Token targets of every split.
    std::string tok = "split,episode_id,window_start_index,token_index\n";
    for (const char* which : {"train", "val", "test"}) {
        for (const auto& tw : data::unique_token_windows(ws.windows(which))) {
            tok += std::string(which) + "," + std::to_string(tw.episode_id) + "," + std::to_string(tw.anchor) + "," +
                   std::to_string(model.encode(tw).index) + "\n";
        }
    }
    write_text(paths.tokens(), tok);

    write_manifest(paths, "train-haq", cfg, {paths.haq(), paths.haq_loss(), paths.codebook_usage(), paths.tokens()},
                   {{"trained_epochs", model.trained_epochs()},
                    {"best_epoch", r.train.best_epoch},
                    {"stopped_early", r.train.stopped_early},
                    {"optimizer_steps", adam.step_count()},
                    {"val_error_m", r.val_error},
                    {"bottom_entropy_bits", r.bottom_entropy},
                    {"bottom_used_fraction", r.bottom_used},
                    {"train_windows", train.size()},
                    {"val_windows", val.size()},
                    {"seconds", r.seconds}});
    say(opt.log, "train-haq: val error " + num(r.val_error) + " m, token entropy " + num(r.bottom_entropy) + " bits");
    return r;
}

namespace {

struct DiffusionData {
    nn::Matrix condition;
    nn::Matrix bits;
};

DiffusionData diffusion_data(Workspace& ws, const std::vector<data::SampleWindow>& windows,
                             const diffusion::DenoiserConfig& dc) {
    DiffusionData d;
    const auto n = static_cast<Eigen::Index>(windows.size());
    d.condition.resize(n, dc.condition_dim);
    d.bits.resize(n, dc.bits_dim());
    const auto& model = ws.haq();
    parallel_for(windows.size(), ws.config().threads, [&](std::size_t i) {
        const auto& w = windows[i];
        const auto c = w.condition_vector();
        if (static_cast<int>(c.size()) != dc.condition_dim) {
            fail(ErrorKind::dimension, "condition vector has " + std::to_string(c.size()) + " values, expected " +
                                           std::to_string(dc.condition_dim));
        }
        std::vector<int> tokens;
        for (const auto& tw : w.token_windows) tokens.push_back(model.encode(tw).index);
        const nn::Matrix b = diffusion::int2bit(tokens, dc.bits);
        const auto r = static_cast<Eigen::Index>(i);
        for (int k = 0; k < dc.condition_dim; ++k) d.condition(r, k) = c[static_cast<std::size_t>(k)];
        for (int k = 0; k < dc.bits_dim(); ++k) d.bits(r, k) = b.data()[k];
    });
    return d;
}

}  // namespace

DiffusionResult train_diffusion(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data", "train-haq"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    ws.haq();
    const diffusion::DenoiserConfig dc = denoiser_config(cfg);
    const DiffusionData train = diffusion_data(ws, ws.windows("train"), dc);
    const DiffusionData val = diffusion_data(ws, ws.windows("val"), dc);
    if (train.bits.rows() == 0) fail(ErrorKind::validation, "no training windows for the denoiser");

    diffusion::Denoiser model;
    std::optional<nn::Checkpoint> resumed;
    if (opt.resume && fs::exists(paths.denoiser())) {
        resumed = nn::Checkpoint::load(paths.denoiser());
        model = diffusion::Denoiser::from_checkpoint(*resumed);
        say(opt.log, "train-diffusion: resuming after epoch " + std::to_string(model.trained_epochs()));
    } else {
        model = diffusion::Denoiser(dc, derive_seed(cfg.seed, 0x64656e21ull));
    }
    nn::AdamW adam(nn::AdamWConfig{cfg.diffusion.learning_rate, 0.9, 0.999, cfg.diffusion.weight_decay, 1e-8},
                   model.parameters());
    if (resumed && resumed->find("opt.step")) nn::load_optimizer(*resumed, "opt", adam);

    diffusion::TrainConfig tc;
    tc.epochs = std::max(0, cfg.diffusion.epochs - model.trained_epochs());
    tc.batch_size = cfg.diffusion.batch_size;
    tc.optimizer = adam.config();
    tc.seed = derive_seed(cfg.seed, 0x64696674ull);
    const auto& sched = ws.schedule();
    const nn::Matrix& vc = val.bits.rows() > 0 ? val.condition : train.condition;
    const nn::Matrix& vb = val.bits.rows() > 0 ? val.bits : train.bits;

    std::vector<std::string> rows =
        resumed ? kept_rows(paths.diffusion_loss(), model.trained_epochs()) : std::vector<std::string>{};
    const auto t0 = Clock::now();
    DiffusionResult r;
    r.log = diffusion::train_denoiser(model, adam, sched, train.condition, train.bits, vc, vb, tc,
                                      [&](const diffusion::EpochLog& l) {
                                          rows.push_back(std::to_string(l.epoch) + "," + num(l.train_loss) + "," +
                                                         num(l.val_loss));
                                          say(opt.log, "train-diffusion: epoch " + std::to_string(l.epoch) +
                                                           " loss " + num(l.train_loss) + " val " + num(l.val_loss));
                                      });
    r.seconds = seconds_since(t0);

    nn::Checkpoint ck = model.to_checkpoint();
    nn::save_optimizer(ck, "opt", adam);
    ck.save(paths.denoiser());
    std::string loss = "epoch,train_loss,val_loss\n";
    for (const auto& row : rows) loss += row + "\n";
    write_text(paths.diffusion_loss(), loss);
    write_manifest(paths, "train-diffusion", cfg, {paths.denoiser(), paths.diffusion_loss()},
                   {{"trained_epochs", model.trained_epochs()},
                    {"optimizer_steps", adam.step_count()},
                    {"final_val_loss", r.log.empty() ? json(nullptr) : json(r.log.back().val_loss)},
                    {"train_windows", train.bits.rows()},
                    {"val_windows", val.bits.rows()},
                    {"seconds", r.seconds}});
    return r;
}

reach::ValueFunction solve_bucket(const RunConfig& cfg, double v_max, const Logger& log) {
    const Paths paths(cfg.out_dir);
    const reach::ReachSpec spec = reach_spec(cfg, v_max);
    const reach::Grid3 grid = reach::Grid3::default_for(spec, cfg.reach.grid_xy, cfg.reach.grid_theta, cfg.reach.grid_margin);
    const fs::path file = paths.value_function(v_max);
    if (fs::exists(file)) {
        try {
            reach::ValueFunction vf = reach::ValueFunction::load(file);
            if (same_spec(vf.spec(), spec) && same_axis(vf.grid().x, grid.x) && same_axis(vf.grid().y, grid.y) &&
                same_axis(vf.grid().theta, grid.theta)) {
                say(log, "compute-brs: reusing " + file.filename().string());
                return vf;
            }
        } catch (const Error&) {
            // Unreadable or stale: solve again below.
        }
    }
    const auto t0 = Clock::now();
    reach::ValueFunction vf = reach::solve_brs(spec, grid, reach::SolverOptions{cfg.reach.cfl, cfg.threads});
    ensure_dir(paths.root);
    vf.save(file);
    say(log, "compute-brs: solved v_max " + num(v_max) + " in " + num(seconds_since(t0)) + " s");
    return vf;
}

BrsResult compute_brs(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data", "train-haq"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    const haq::Haq& model = ws.haq();
    BrsResult r;
    std::vector<reach::ValueFunction> vfs;
    const auto t0 = Clock::now();
    for (double v : cfg.reach.speed_buckets) {
        vfs.push_back(solve_bucket(cfg, v, opt.log));
        r.value_functions.push_back(paths.value_function(v));
    }
    r.solve_seconds = seconds_since(t0);
    const auto haq_bytes = read_bytes(paths.haq());
    const Digest digest = reach::table_digest(haq_bytes, vfs, cfg.reach.temperature);
    const auto table = reach::load_or_build_table(paths.table(), model, vfs, cfg.reach.temperature, digest,
                                                  &r.table_rebuilt, cfg.threads);
    std::size_t feasible = 0;
    for (int i = 0; i < table.size(); ++i) {
        for (int j = 0; j < table.size(); ++j) feasible += table.hard(i, j) ? 1 : 0;
    }
    auto outputs = r.value_functions;
    outputs.push_back(paths.table());
    write_manifest(paths, "compute-brs", cfg, outputs,
                   {{"buckets", cfg.reach.speed_buckets},
                    {"table_rebuilt", r.table_rebuilt},
                    {"table_digest", hex(table.digest())},
                    {"hard_feasible_pairs", static_cast<double>(feasible) / (double(table.size()) * table.size())},
                    {"solve_seconds", r.solve_seconds}});
    say(opt.log, "compute-brs: " + std::to_string(vfs.size()) + " value functions, table " +
                     (r.table_rebuilt ? "built" : "reused"));
    return r;
}

SampleSet sample(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data", "train-haq", "train-diffusion", "compute-brs"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    const double s = cfg.sampling.guidance_scale;
    const reach::FeasibilityTable* table = &ws.table();
    const auto ids = ws.condition_ids();
    const auto t0 = Clock::now();
    SampleSet set = draw_samples(ws, ids, cfg.sampling.samples, s, table, derive_seed(cfg.seed, 0x73616d70ull));
    set.save(paths.samples(), table);
    write_manifest(paths, "sample", cfg, {paths.samples()},
                   {{"guidance_scale", s},
                    {"conditions", ids.size()},
                    {"samples", cfg.sampling.samples},
                    {"seconds", seconds_since(t0)}});
    say(opt.log, "sample: " + std::to_string(ids.size()) + " conditions x " + std::to_string(cfg.sampling.samples) +
                     " samples, guidance scale " + num(s));
    return set;
}

Evaluation evaluate(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data", "train-haq", "compute-brs", "sample"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    const SampleSet set = SampleSet::load(paths.samples());
    const Evaluation ev = evaluate_samples(ws, set, &ws.table(), cfg.sampling.horizon);
    write_text(paths.report(), ev.report.to_json());

    std::string pc = "condition_id,episode_id,mean_ade,mean_fde,min_ade,min_fde,multimodality,goal_rate,"
                     "feasibility_rate,cv_ade,cv_fde\n";
    for (const auto& m : ev.conditions) {
        pc += std::to_string(m.condition_id) + "," + std::to_string(m.episode_id) + "," + num(m.mean_ade) + "," +
              num(m.mean_fde) + "," + num(m.min_ade) + "," + num(m.min_fde) + "," + num(m.multimodality) + "," +
              num(m.goal_rate) + "," + num(m.feasibility_rate) + "," + num(m.cv_ade) + "," + num(m.cv_fde) + "\n";
    }
    write_text(paths.per_condition(), pc);

    std::string hz = "horizon,ade,fde,min_ade,min_fde,cv_ade,cv_fde\n";
    for (const auto& h : ev.horizons) {
        hz += std::to_string(h.horizon) + "," + num(h.ade) + "," + num(h.fde) + "," + num(h.min_ade) + "," +
              num(h.min_fde) + "," + num(h.cv_ade) + "," + num(h.cv_fde) + "\n";
    }
    write_text(paths.horizon(), hz);

    std::vector<fs::path> outputs{paths.report(), paths.per_condition(), paths.horizon()};
    const int n_plots = std::min<int>(cfg.sampling.plots, static_cast<int>(set.condition_ids.size()));
    if (n_plots > 0) ensure_dir(paths.plots());
    const auto& test = ws.windows("test");
    for (int c = 0; c < n_plots; ++c) {
        const auto& w = test[static_cast<std::size_t>(set.condition_ids[static_cast<std::size_t>(c)])];
        std::vector<std::vector<dynamics::Point2>> samples;
        for (const auto& seq : set.tokens[static_cast<std::size_t>(c)]) {
            samples.push_back(to_global(w.frame, head(decode_sample(ws.haq(), seq), cfg.sampling.horizon)));
        }
        const fs::path file = paths.plots() / ("condition_" + std::to_string(set.condition_ids[static_cast<std::size_t>(c)]) + ".svg");
        write_text(file, plot_svg(ws.scene(), to_global(w.frame, w.past),
                                  to_global(w.frame, head(w.future, cfg.sampling.horizon)), samples));
        outputs.push_back(file);
    }
    write_manifest(paths, "evaluate", cfg, outputs,
                   {{"guidance_scale_of_samples", cfg.sampling.guidance_scale},
                    {"horizon", cfg.sampling.horizon},
                    {"report", json::parse(ev.report.to_json())}});
    say(opt.log, "evaluate: min ADE " + num(ev.report.min_ade) + " m, min FDE " + num(ev.report.min_fde) +
                     " m, constant-velocity ADE " + num(ev.report.cv_ade) + " m");
    return ev;
}

AblationResult ablate_brs(const RunConfig& cfg, const StageOptions& opt) {
    require_stages(Paths(cfg.out_dir), {"gen-data", "train-haq", "train-diffusion"});
    Workspace ws(cfg);
    const Paths& paths = ws.paths();
    const haq::Haq& model = ws.haq();
    ws.denoiser();
    ensure_dir(paths.ablation());
    const auto haq_bytes = read_bytes(paths.haq());
    const double s = cfg.sampling.guidance_scale > 0.0 ? cfg.sampling.guidance_scale : 1.0;

    struct Setting {
        std::string name;
        std::vector<double> buckets;
    };
    const std::vector<Setting> settings{
        {"1_bucket", {cfg.reach.speed_buckets.back()}},
        {std::to_string(cfg.reach.speed_buckets.size()) + "_buckets", cfg.reach.speed_buckets},
    };
    const auto ids = ws.condition_ids();
    AblationResult r;
    std::vector<fs::path> outputs;
    for (const auto& st : settings) {
        std::vector<reach::ValueFunction> vfs;
        for (double v : st.buckets) vfs.push_back(solve_bucket(cfg, v, opt.log));
        const Digest digest = reach::table_digest(haq_bytes, vfs, cfg.reach.temperature);
        const fs::path tpath = paths.ablation() / ("feasibility_" + st.name + ".rdft");
        const auto table = reach::load_or_build_table(tpath, model, vfs, cfg.reach.temperature, digest, nullptr, cfg.threads);
        outputs.push_back(tpath);
        AblationSummary sum;
        sum.name = st.name;
        std::vector<double> ades, mms;
        for (int k = 0; k < kAblationSeeds; ++k) {
            const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(k);
            const SampleSet set =
                draw_samples(ws, ids, cfg.sampling.samples, s, &table, derive_seed(seed, 0x73616d70ull));
            // Feasibility is scored against each setting's own table.
            const Evaluation ev = evaluate_samples(ws, set, &table, cfg.sampling.horizon);
            r.rows.push_back(AblationRow{st.name, st.buckets, seed, ev.report});
            ades.push_back(ev.report.min_ade);
            mms.push_back(ev.report.multimodality);
            sum.feasibility_mean += ev.report.feasibility_rate / kAblationSeeds;
            say(opt.log, "ablate-brs: " + st.name + " seed " + std::to_string(seed) + " min ADE " +
                             num(ev.report.min_ade) + " multimodality " + num(ev.report.multimodality));
        }
        auto mean_std = [](const std::vector<double>& x, double& m, double& sd) {
            m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
            double ss = 0.0;
            for (double v : x) ss += (v - m) * (v - m);
            sd = x.size() > 1 ? std::sqrt(ss / static_cast<double>(x.size() - 1)) : 0.0;
        };
        mean_std(ades, sum.min_ade_mean, sum.min_ade_std);
        mean_std(mms, sum.multimodality_mean, sum.multimodality_std);
        r.summary.push_back(sum);
    }
    // Two standard errors of the difference of means.
    auto band = [](double sd1, double sd2) {
        return 2.0 * std::sqrt((sd1 * sd1 + sd2 * sd2) / static_cast<double>(kAblationSeeds));
    };
    r.min_ade_band = band(r.summary[0].min_ade_std, r.summary[1].min_ade_std);
    r.multimodality_band = band(r.summary[0].multimodality_std, r.summary[1].multimodality_std);

    std::string csv = "setting,buckets,seed,min_ade,min_fde,multimodality,feasibility_rate,goal_rate,ade,fde\n";
    for (const auto& row : r.rows) {
        std::string b;
        for (double v : row.buckets) b += (b.empty() ? "" : ";") + num(v);
        csv += row.name + "," + b + "," + std::to_string(row.seed) + "," + num(row.report.min_ade) + "," +
               num(row.report.min_fde) + "," + num(row.report.multimodality) + "," + num(row.report.feasibility_rate) +
               "," + num(row.report.goal_rate) + "," + num(row.report.ade) + "," + num(row.report.fde) + "\n";
    }
    const fs::path csv_path = paths.ablation() / "ablation.csv";
    write_text(csv_path, csv);
    json summary = json::array();
    for (const auto& sm : r.summary) {
        summary.push_back({{"setting", sm.name},
                           {"min_ade_mean", sm.min_ade_mean},
                           {"min_ade_std", sm.min_ade_std},
                           {"multimodality_mean", sm.multimodality_mean},
                           {"multimodality_std", sm.multimodality_std},
                           {"feasibility_mean", sm.feasibility_mean}});
    }
    json sj = {{"guidance_scale", s},
               {"conditions", ids.size()},
               {"seeds", kAblationSeeds},
               {"settings", summary},
               {"min_ade_band", r.min_ade_band},
               {"multimodality_band", r.multimodality_band}};
    const fs::path json_path = paths.ablation() / "ablation.json";
    write_text(json_path, sj.dump(2) + "\n");
    outputs.push_back(csv_path);
    outputs.push_back(json_path);
    write_manifest(paths, "ablate-brs", cfg, outputs, sj);
    return r;
}

std::string plot_svg(const data::Scene& scene, const std::vector<dynamics::Point2>& past,
                     const std::vector<dynamics::Point2>& truth,
                     const std::vector<std::vector<dynamics::Point2>>& samples) {
    constexpr double px = 60.0;
    const double w = (scene.x_max - scene.x_min) * px;
    const double h = (scene.y_max - scene.y_min) * px;
    auto sx = [&](double x) { return num(std::round((x - scene.x_min) * px * 100.0) / 100.0); };
    auto sy = [&](double y) { return num(std::round((scene.y_max - y) * px * 100.0) / 100.0); };
    auto polyline = [&](const std::vector<dynamics::Point2>& pts, const char* style) {
        std::string s = "  <polyline fill=\"none\" " + std::string(style) + " points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) s += (i ? " " : "") + sx(pts[i].x) + "," + sy(pts[i].y);
        return s + "\"/>\n";
    };
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
                      "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
    out += "  <rect x=\"0\" y=\"0\" width=\"" + num(w) + "\" height=\"" + num(h) +
           "\" fill=\"white\" stroke=\"black\"/>\n";
    for (const auto& g : scene.goals) {
        out += "  <circle cx=\"" + sx(g.x) + "\" cy=\"" + sy(g.y) + "\" r=\"" + num(scene.goal_radius * px) +
               "\" fill=\"#f3e5ab\" stroke=\"#b8860b\"/>\n";
    }
    for (const auto& s : samples) {
        std::vector<dynamics::Point2> pts;
        if (!past.empty()) pts.push_back(past.back());
        pts.insert(pts.end(), s.begin(), s.end());
        out += polyline(pts, "stroke=\"#1f77b4\" stroke-opacity=\"0.45\" stroke-width=\"1.5\"");
    }
    std::vector<dynamics::Point2> t;
    if (!past.empty()) t.push_back(past.back());
    t.insert(t.end(), truth.begin(), truth.end());
    out += polyline(t, "stroke=\"#2ca02c\" stroke-width=\"2.5\"");
    out += polyline(past, "stroke=\"black\" stroke-width=\"2.5\"");
    out += "</svg>\n";
    return out;
}

}  // namespace rdiff::pipeline
