#include "rdiff/rdiff.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "rdiff/config.hpp"
#include "rdiff/diffusion.hpp"
#include "rdiff/eval.hpp"
#include "rdiff/haq.hpp"
#include "rdiff/pipeline.hpp"
#include "rdiff/reachability.hpp"

struct rdiff_config {
    rdiff::RunConfig cfg;
};

struct rdiff_haq {
    rdiff::haq::Haq model;
};

struct rdiff_value_function {
    rdiff::reach::ValueFunction vf;
};

namespace {

thread_local std::string g_last_error;

rdiff_status status_of(rdiff::ErrorKind k) {
    switch (k) {
        case rdiff::ErrorKind::validation: return RDIFF_ERR_VALIDATION;
        case rdiff::ErrorKind::dimension: return RDIFF_ERR_DIMENSION;
        case rdiff::ErrorKind::io: return RDIFF_ERR_IO;
        case rdiff::ErrorKind::numeric: return RDIFF_ERR_NUMERIC;
        case rdiff::ErrorKind::state: return RDIFF_ERR_STATE;
    }
    return RDIFF_ERR_INTERNAL;
}

rdiff_status set_error(rdiff_status s, std::string msg) {
    g_last_error = std::move(msg);
    return s;
}

struct NullArg {};

template <class... Ptrs>
void need(const char* what, Ptrs... ptrs) {
    if (((ptrs == nullptr) || ...)) {
        g_last_error = std::string("null argument: ") + what;
        throw NullArg{};
    }
}

template <class F>
rdiff_status call(F&& body) {
    try {
        g_last_error.clear();
        body();
        return RDIFF_OK;
    } catch (const NullArg&) {
        return RDIFF_ERR_NULL_ARGUMENT;
    } catch (const rdiff::Error& e) {
        return set_error(status_of(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return set_error(RDIFF_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(RDIFF_ERR_INTERNAL, e.what());
    } catch (...) {
        return set_error(RDIFF_ERR_INTERNAL, "unknown error");
    }
}

char* copy_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

rdiff::dynamics::Pose2 pose(const double p[3]) { return {p[0], p[1], p[2]}; }

}  // namespace

extern "C" {

const char* rdiff_last_error(void) { return g_last_error.c_str(); }

const char* rdiff_status_name(rdiff_status status) {
    switch (status) {
        case RDIFF_OK: return "ok";
        case RDIFF_ERR_VALIDATION: return "validation error";
        case RDIFF_ERR_DIMENSION: return "dimension error";
        case RDIFF_ERR_IO: return "i/o error";
        case RDIFF_ERR_NUMERIC: return "numeric error";
        case RDIFF_ERR_STATE: return "state error";
        case RDIFF_ERR_NULL_ARGUMENT: return "null argument";
        case RDIFF_ERR_OUT_OF_RANGE: return "out of range";
        case RDIFF_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

const char* rdiff_version(void) { return "0.1.0"; }

void rdiff_string_free(char* s) { std::free(s); }

rdiff_status rdiff_config_default(rdiff_config** out) {
    return call([&] {
        need("out", out);
        *out = new rdiff_config{};
    });
}

rdiff_status rdiff_config_from_json(const char* json, rdiff_config** out) {
    return call([&] {
        need("json/out", json, out);
        auto* c = new rdiff_config{};
        try {
            c->cfg = rdiff::RunConfig::from_json(json);
        } catch (...) {
            delete c;
            throw;
        }
        *out = c;
    });
}

rdiff_status rdiff_config_load(const char* path, rdiff_config** out) {
    return call([&] {
        need("path/out", path, out);
        auto* c = new rdiff_config{};
        try {
            c->cfg = rdiff::RunConfig::load(path);
        } catch (...) {
            delete c;
            throw;
        }
        *out = c;
    });
}

rdiff_status rdiff_config_to_json(const rdiff_config* cfg, char** out) {
    return call([&] {
        need("cfg/out", cfg, out);
        *out = copy_string(cfg->cfg.to_json());
    });
}

rdiff_status rdiff_config_validate(const rdiff_config* cfg) {
    return call([&] {
        need("cfg", cfg);
        cfg->cfg.validate();
    });
}

void rdiff_config_free(rdiff_config* cfg) { delete cfg; }

rdiff_status rdiff_config_set_seed(rdiff_config* cfg, uint64_t seed) {
    return call([&] {
        need("cfg", cfg);
        cfg->cfg.seed = seed;
    });
}

rdiff_status rdiff_config_set_threads(rdiff_config* cfg, int threads) {
    return call([&] {
        need("cfg", cfg);
        if (threads < 1) rdiff::fail(rdiff::ErrorKind::validation, "threads must be at least 1");
        cfg->cfg.threads = threads;
    });
}

rdiff_status rdiff_config_set_out_dir(rdiff_config* cfg, const char* dir) {
    return call([&] {
        need("cfg/dir", cfg, dir);
        if (*dir == '\0') rdiff::fail(rdiff::ErrorKind::validation, "output directory must not be empty");
        cfg->cfg.out_dir = dir;
    });
}

rdiff_status rdiff_config_set_guidance_scale(rdiff_config* cfg, double scale) {
    return call([&] {
        need("cfg", cfg);
        if (!(scale >= 0.0) || !std::isfinite(scale)) {
            rdiff::fail(rdiff::ErrorKind::validation, "guidance scale must be finite and non-negative");
        }
        cfg->cfg.sampling.guidance_scale = scale;
    });
}

rdiff_status rdiff_config_set_samples(rdiff_config* cfg, int samples) {
    return call([&] {
        need("cfg", cfg);
        if (samples < 2) rdiff::fail(rdiff::ErrorKind::validation, "samples must be at least 2");
        cfg->cfg.sampling.samples = samples;
    });
}

rdiff_status rdiff_config_set_horizon(rdiff_config* cfg, int horizon) {
    return call([&] {
        need("cfg", cfg);
        if (horizon < 1 || horizon > cfg->cfg.window.future) {
            rdiff::fail(rdiff::ErrorKind::validation,
                        "horizon must be in [1, " + std::to_string(cfg->cfg.window.future) + "]");
        }
        cfg->cfg.sampling.horizon = horizon;
    });
}

rdiff_status rdiff_run_stage(const rdiff_config* cfg, const char* stage, int resume, rdiff_log_fn log, void* user) {
    return call([&] {
        need("cfg/stage", cfg, stage);
        namespace p = rdiff::pipeline;
        p::StageOptions opt;
        opt.resume = resume != 0;
        if (log) opt.log = [log, user](const std::string& m) { log(m.c_str(), user); };
        const std::string s = stage;
        const rdiff::RunConfig& c = cfg->cfg;
        if (s == "gen-data") p::gen_data(c, opt);
        else if (s == "train-haq") p::train_haq(c, opt);
        else if (s == "train-diffusion") p::train_diffusion(c, opt);
        else if (s == "compute-brs") p::compute_brs(c, opt);
        else if (s == "sample") p::sample(c, opt);
        else if (s == "evaluate") p::evaluate(c, opt);
        else if (s == "ablate-brs") p::ablate_brs(c, opt);
        else rdiff::fail(rdiff::ErrorKind::validation, "unknown stage '" + s + "'");
    });
}

rdiff_status rdiff_int2bit(const int* tokens, size_t n, int bits, double* out) {
    return call([&] {
        need("tokens/out", tokens, out);
        const auto m = rdiff::diffusion::int2bit(std::span<const int>(tokens, n), bits);
        std::memcpy(out, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    });
}

rdiff_status rdiff_bit2int(const double* bits, size_t n, int nbits, int* out) {
    return call([&] {
        need("bits/out", bits, out);
        if (nbits < 1 || nbits > 30) rdiff::fail(rdiff::ErrorKind::validation, "bits per token must be in [1, 30]");
        rdiff::nn::Matrix m(static_cast<Eigen::Index>(n), nbits);
        std::memcpy(m.data(), bits, sizeof(double) * n * static_cast<std::size_t>(nbits));
        const auto t = rdiff::diffusion::bit2int(m);
        std::copy(t.begin(), t.end(), out);
    });
}

namespace {

std::vector<rdiff::dynamics::Point2> points(const double* xy, size_t n) {
    std::vector<rdiff::dynamics::Point2> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = {xy[2 * i], xy[2 * i + 1]};
    return p;
}

}  // namespace

rdiff_status rdiff_ade(const double* pred, const double* truth, size_t n, double* out) {
    return call([&] {
        need("pred/truth/out", pred, truth, out);
        *out = rdiff::eval::ade(points(pred, n), points(truth, n));
    });
}

rdiff_status rdiff_fde(const double* pred, const double* truth, size_t n, double* out) {
    return call([&] {
        need("pred/truth/out", pred, truth, out);
        *out = rdiff::eval::fde(points(pred, n), points(truth, n));
    });
}

rdiff_status rdiff_haq_load(const char* path, rdiff_haq** out) {
    return call([&] {
        need("path/out", path, out);
        *out = new rdiff_haq{rdiff::haq::Haq::load(path)};
    });
}

int rdiff_haq_codebook_size(const rdiff_haq* haq) { return haq ? haq->model.codebook_size() : 0; }

int rdiff_haq_window_steps(const rdiff_haq* haq) { return haq ? haq->model.window_steps() : 0; }

rdiff_status rdiff_haq_decode(const rdiff_haq* haq, int token, double* out_xy, size_t capacity) {
    return call([&] {
        need("haq/out", haq, out_xy);
        if (token < 0 || token >= haq->model.codebook_size()) {
            throw rdiff::Error(rdiff::ErrorKind::validation, "token " + std::to_string(token) + " outside [0, " +
                                                                 std::to_string(haq->model.codebook_size()) + ")");
        }
        const auto seg = haq->model.decode(rdiff::ActionToken{token});
        if (capacity < 2 * seg.size()) {
            rdiff::fail(rdiff::ErrorKind::dimension, "output buffer holds " + std::to_string(capacity) +
                                                         " doubles, need " + std::to_string(2 * seg.size()));
        }
        for (size_t i = 0; i < seg.size(); ++i) {
            out_xy[2 * i] = seg[i].x;
            out_xy[2 * i + 1] = seg[i].y;
        }
    });
}

void rdiff_haq_free(rdiff_haq* haq) { delete haq; }

rdiff_reach_spec rdiff_reach_spec_default(void) {
    const rdiff::reach::ReachSpec s;
    return {s.v_max, s.turn_bound, s.accel_bound, s.horizon, s.target_radius};
}

rdiff_status rdiff_solve_brs(const rdiff_reach_spec* spec, int grid_xy, int grid_theta, double margin, int threads,
                             rdiff_value_function** out) {
    return call([&] {
        need("spec/out", spec, out);
        rdiff::reach::ReachSpec s;
        s.v_max = spec->v_max;
        s.turn_bound = spec->turn_bound;
        s.accel_bound = spec->accel_bound;
        s.horizon = spec->horizon;
        s.target_radius = spec->target_radius;
        s.validate();
        const auto grid = rdiff::reach::Grid3::default_for(s, grid_xy, grid_theta, margin);
        rdiff::reach::SolverOptions o;
        o.threads = threads < 1 ? 1 : threads;
        *out = new rdiff_value_function{rdiff::reach::solve_brs(s, grid, o)};
    });
}

rdiff_status rdiff_value_function_load(const char* path, rdiff_value_function** out) {
    return call([&] {
        need("path/out", path, out);
        *out = new rdiff_value_function{rdiff::reach::ValueFunction::load(path)};
    });
}

rdiff_status rdiff_value_function_save(const rdiff_value_function* vf, const char* path) {
    return call([&] {
        need("vf/path", vf, path);
        vf->vf.save(path);
    });
}

rdiff_status rdiff_value_function_query(const rdiff_value_function* vf, double x, double y, double theta,
                                        double* out) {
    const rdiff_status s = call([&] { need("vf/out", vf, out); });
    if (s != RDIFF_OK) return s;
    const auto v = vf->vf.interpolate(x, y, theta);
    if (!v) return set_error(RDIFF_ERR_OUT_OF_RANGE, "query lies outside the value-function grid");
    *out = *v;
    return RDIFF_OK;
}

rdiff_status rdiff_membership(const rdiff_value_function* vf, const double query[3], const double anchor[3],
                              int* out) {
    return call([&] {
        need("vf/query/anchor/out", vf, query, anchor, out);
        *out = rdiff::reach::membership(vf->vf, pose(query), pose(anchor)) ? 1 : 0;
    });
}

rdiff_status rdiff_soft_membership(const rdiff_value_function* vf, const double query[3], const double anchor[3],
                                   double temperature, double* out) {
    return call([&] {
        need("vf/query/anchor/out", vf, query, anchor, out);
        *out = rdiff::reach::soft_membership(vf->vf, pose(query), pose(anchor), temperature);
    });
}

void rdiff_value_function_free(rdiff_value_function* vf) { delete vf; }

}  // extern "C"
