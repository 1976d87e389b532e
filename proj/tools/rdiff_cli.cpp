// rdiff: command-line driver for the trajectory-diffusion pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rdiff/rdiff.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;

int exit_code(rdiff_status s) {
    if (s == RDIFF_OK) return kExitOk;
    return s == RDIFF_ERR_VALIDATION ? kExitValidation : kExitFailure;
}

int report(rdiff_status s) {
    if (s != RDIFF_OK) {
        std::cerr << "rdiff: " << rdiff_status_name(s) << ": " << rdiff_last_error() << "\n";
    }
    return exit_code(s);
}

void log_line(const char* message, void* /*user*/) { std::cerr << message << std::endl; }

struct ConfigHandle {
    rdiff_config* ptr = nullptr;
    ~ConfigHandle() { rdiff_config_free(ptr); }
};

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> guidance_scale;
    std::optional<int> horizon;
    std::optional<int> samples;
    std::optional<int> threads;
    std::optional<std::string> out_dir;
    bool resume = false;
};

rdiff_status build_config(const Overrides& o, ConfigHandle& h) {
    rdiff_status s = o.config_path.empty() ? rdiff_config_default(&h.ptr) : rdiff_config_load(o.config_path.c_str(), &h.ptr);
    if (s != RDIFF_OK) return s;
    if (o.seed && (s = rdiff_config_set_seed(h.ptr, *o.seed)) != RDIFF_OK) return s;
    if (o.threads && (s = rdiff_config_set_threads(h.ptr, *o.threads)) != RDIFF_OK) return s;
    if (o.out_dir && (s = rdiff_config_set_out_dir(h.ptr, o.out_dir->c_str())) != RDIFF_OK) return s;
    if (o.guidance_scale && (s = rdiff_config_set_guidance_scale(h.ptr, *o.guidance_scale)) != RDIFF_OK) return s;
    if (o.samples && (s = rdiff_config_set_samples(h.ptr, *o.samples)) != RDIFF_OK) return s;
    if (o.horizon && (s = rdiff_config_set_horizon(h.ptr, *o.horizon)) != RDIFF_OK) return s;
    return rdiff_config_validate(h.ptr);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reachability-guided trajectory diffusion over learned action tokens"};
    app.require_subcommand(0, 1);

    Overrides o;
    bool print_config = false;
    app.add_option("--config", o.config_path, "JSON run configuration (defaults are built in)")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", o.seed, "Base seed");
    app.add_option("--guidance-scale", o.guidance_scale, "Reachability guidance scale s (0 = unguided)");
    app.add_option("--horizon", o.horizon, "Evaluation horizon in steps");
    app.add_option("--samples", o.samples, "Samples per condition (default 20)");
    app.add_option("--threads", o.threads, "Worker cap");
    app.add_option("--out-dir", o.out_dir, "Run directory");
    app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");

    const std::vector<std::pair<std::string, std::string>> stages{
        {"gen-data", "Generate episodes, scene and split"},
        {"train-haq", "Train the hierarchical action quantizer"},
        {"train-diffusion", "Train the token denoiser"},
        {"compute-brs", "Solve value functions and build the feasibility table"},
        {"sample", "Draw token samples for the test conditions"},
        {"evaluate", "Score samples and write report, horizon CSV and plots"},
        {"ablate-brs", "Compare one speed bucket against the configured buckets"},
    };
    for (const auto& [name, help] : stages) {
        CLI::App* sub = app.add_subcommand(name, help);
        if (name == "train-haq" || name == "train-diffusion") {
            sub->add_flag("--resume", o.resume, "Continue from the existing checkpoint");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    ConfigHandle cfg;
    if (const rdiff_status s = build_config(o, cfg); s != RDIFF_OK) return report(s);

    if (print_config) {
        char* json = nullptr;
        const rdiff_status s = rdiff_config_to_json(cfg.ptr, &json);
        if (s != RDIFF_OK) return report(s);
        std::fputs(json, stdout);
        rdiff_string_free(json);
        return kExitOk;
    }
    const auto subs = app.get_subcommands();
    if (subs.empty()) {
        std::cerr << app.help();
        return kExitValidation;
    }
    return report(rdiff_run_stage(cfg.ptr, subs.front()->get_name().c_str(), o.resume ? 1 : 0, log_line, nullptr));
}
