#ifndef RDIFF_H
#define RDIFF_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define RDIFF_API __declspec(dllexport)
#else
#define RDIFF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rdiff_status {
    RDIFF_OK = 0,
    RDIFF_ERR_VALIDATION = 1,
    RDIFF_ERR_DIMENSION = 2,
    RDIFF_ERR_IO = 3,
    RDIFF_ERR_NUMERIC = 4,
    RDIFF_ERR_STATE = 5,
    RDIFF_ERR_NULL_ARGUMENT = 6,
    RDIFF_ERR_OUT_OF_RANGE = 7,
    RDIFF_ERR_INTERNAL = 8
} rdiff_status;

/* Message of the last failing call on this thread; "" after success. */
RDIFF_API const char* rdiff_last_error(void);
RDIFF_API const char* rdiff_status_name(rdiff_status status);
RDIFF_API const char* rdiff_version(void);

/* Strings returned through char** are owned by the caller. */
RDIFF_API void rdiff_string_free(char* s);

/* ---- run configuration ---- */
typedef struct rdiff_config rdiff_config;

RDIFF_API rdiff_status rdiff_config_default(rdiff_config** out);
RDIFF_API rdiff_status rdiff_config_from_json(const char* json, rdiff_config** out);
RDIFF_API rdiff_status rdiff_config_load(const char* path, rdiff_config** out);
RDIFF_API rdiff_status rdiff_config_to_json(const rdiff_config* cfg, char** out);
RDIFF_API rdiff_status rdiff_config_validate(const rdiff_config* cfg);
RDIFF_API void rdiff_config_free(rdiff_config* cfg);

RDIFF_API rdiff_status rdiff_config_set_seed(rdiff_config* cfg, uint64_t seed);
RDIFF_API rdiff_status rdiff_config_set_threads(rdiff_config* cfg, int threads);
RDIFF_API rdiff_status rdiff_config_set_out_dir(rdiff_config* cfg, const char* dir);
RDIFF_API rdiff_status rdiff_config_set_guidance_scale(rdiff_config* cfg, double scale);
RDIFF_API rdiff_status rdiff_config_set_samples(rdiff_config* cfg, int samples);
RDIFF_API rdiff_status rdiff_config_set_horizon(rdiff_config* cfg, int horizon);

/* ---- pipeline stages ---- */
typedef void (*rdiff_log_fn)(const char* message, void* user);

/* stage: "gen-data", "train-haq", "train-diffusion", "compute-brs", "sample",
 * "evaluate" or "ablate-brs". `resume` applies to the training stages. */
RDIFF_API rdiff_status rdiff_run_stage(const rdiff_config* cfg, const char* stage, int resume, rdiff_log_fn log,
                                       void* user);

/* ---- analog bits ---- */
/* tokens[n] -> out[n * bits], big-endian, values in {-1, +1}. */
RDIFF_API rdiff_status rdiff_int2bit(const int* tokens, size_t n, int bits, double* out);
/* values[n * bits] -> out[n], thresholded at 0. */
RDIFF_API rdiff_status rdiff_bit2int(const double* values, size_t n, int bits, int* out);

/* ---- metrics (trajectories as interleaved x, y) ---- */
RDIFF_API rdiff_status rdiff_ade(const double* pred, const double* truth, size_t points, double* out);
RDIFF_API rdiff_status rdiff_fde(const double* pred, const double* truth, size_t points, double* out);

/* ---- HAQ decoder ---- */
typedef struct rdiff_haq rdiff_haq;

RDIFF_API rdiff_status rdiff_haq_load(const char* path, rdiff_haq** out);
RDIFF_API int rdiff_haq_codebook_size(const rdiff_haq* haq);
RDIFF_API int rdiff_haq_window_steps(const rdiff_haq* haq);
/* Writes window_steps + 1 points (2 * (window_steps + 1) doubles). */
RDIFF_API rdiff_status rdiff_haq_decode(const rdiff_haq* haq, int token, double* out_xy, size_t capacity);
RDIFF_API void rdiff_haq_free(rdiff_haq* haq);

/* ---- backward reachable sets ---- */
typedef struct rdiff_value_function rdiff_value_function;

typedef struct rdiff_reach_spec {
    double v_max;
    double turn_bound;
    double accel_bound;
    double horizon;
    double target_radius;
} rdiff_reach_spec;

RDIFF_API rdiff_reach_spec rdiff_reach_spec_default(void);
RDIFF_API rdiff_status rdiff_solve_brs(const rdiff_reach_spec* spec, int grid_xy, int grid_theta, double margin,
                                       int threads, rdiff_value_function** out);
RDIFF_API rdiff_status rdiff_value_function_load(const char* path, rdiff_value_function** out);
RDIFF_API rdiff_status rdiff_value_function_save(const rdiff_value_function* vf, const char* path);
/* Value at (x, y, theta) in the target frame; RDIFF_ERR_OUT_OF_RANGE off the grid. */
RDIFF_API rdiff_status rdiff_value_function_query(const rdiff_value_function* vf, double x, double y, double theta,
                                                  double* out);
/* Membership of `query` in the set anchored at `anchor` (each x, y, theta). */
RDIFF_API rdiff_status rdiff_membership(const rdiff_value_function* vf, const double query[3],
                                        const double anchor[3], int* out);
RDIFF_API rdiff_status rdiff_soft_membership(const rdiff_value_function* vf, const double query[3],
                                             const double anchor[3], double temperature, double* out);
RDIFF_API void rdiff_value_function_free(rdiff_value_function* vf);

#ifdef __cplusplus
}
#endif

#endif
