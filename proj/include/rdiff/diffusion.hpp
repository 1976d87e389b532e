#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "rdiff/nn.hpp"
#include "rdiff/reachability.hpp"

// DDPM over analog bits of future token sequences, with optional
// reachability guidance of the reverse-process mean.
namespace rdiff::diffusion {

using nn::Matrix;

struct NoiseSchedule {
    int steps = 0;
    std::vector<double> alpha_bar;  // index 0..K
    std::vector<double> alpha;      // alpha[0] = 1
    std::vector<double> sigma;      // posterior std, sigma[0] = 0
};

/// Squared-cosine schedule with offset s: alpha_bar[k] = f(k)/f(0),
/// f(k) = cos^2(((k/K + s)/(1 + s)) pi/2).
NoiseSchedule cosine_schedule(int steps, double offset = 0.008);

/// Forward process: sqrt(ab_k) A0 + sqrt(1 - ab_k) eps, one step per row.
Matrix noisy_bits(const NoiseSchedule& schedule, const Matrix& clean, std::span<const int> steps, const Matrix& noise);

/// Big-endian bit expansion, {0, 1} -> {-1, +1}; one row per token.
Matrix int2bit(std::span<const int> tokens, int bits = 8);
/// Thresholds at 0 (>= 0 is a one bit) and reassembles each row.
std::vector<int> bit2int(const Matrix& bits);

/// Sinusoidal embedding of the step index.
Matrix time_embedding(std::span<const int> steps, int dim);

struct DenoiserConfig {
    int condition_dim = 572;
    int tokens = 6;
    int bits = 8;
    int time_dim = 16;
    std::vector<int> hidden_dims{512, 512, 512};
    nn::Activation activation = nn::Activation::gelu;

    void validate() const;
    int bits_dim() const { return tokens * bits; }
};

class Denoiser {
public:
    Denoiser() = default;
    Denoiser(DenoiserConfig config, std::uint64_t seed);

    const DenoiserConfig& config() const { return config_; }
    /// Predicted noise, one row per batch entry.
    Matrix predict(const Matrix& condition, const Matrix& noisy_bits, std::span<const int> steps) const;
    nn::Var forward(nn::Tape& tape, const Matrix& condition, const Matrix& noisy_bits, std::span<const int> steps);
    std::vector<nn::Parameter*> parameters() { return net_.parameters(); }

    int trained_epochs() const { return trained_epochs_; }
    void set_trained_epochs(int e) { trained_epochs_ = e; }

    nn::Checkpoint to_checkpoint() const;
    static Denoiser from_checkpoint(const nn::Checkpoint& ckpt);
    void save(const std::filesystem::path& path) const;
    static Denoiser load(const std::filesystem::path& path);

private:
    Matrix input(const Matrix& condition, const Matrix& noisy_bits, std::span<const int> steps) const;

    DenoiserConfig config_;
    nn::Mlp net_;
    int trained_epochs_ = 0;
};

/// Noise-prediction objective for given steps and noise:
/// mean over rows of ||G(S, sqrt(ab) A0 + sqrt(1 - ab) eps, k) - eps||^2.
nn::Var denoising_loss(nn::Tape& tape, Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                       const Matrix& clean_bits, std::span<const int> steps, const Matrix& noise);

/// Draws k uniform in 1..K and standard normal noise, then records the loss.
nn::Var denoising_loss(nn::Tape& tape, Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                       const Matrix& clean_bits, Rng& rng);

/// One optimizer step on a batch; returns the batch loss.
double train_step(Denoiser& model, nn::AdamW& optimizer, const NoiseSchedule& schedule, const Matrix& condition,
                  const Matrix& clean_bits, Rng& rng);

struct TrainConfig {
    int epochs = 100;
    int batch_size = 128;
    nn::AdamWConfig optimizer{1e-4, 0.9, 0.999, 0.0, 1e-8};
    std::uint64_t seed = 0;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Loss over a fixed, seeded draw of (k, noise) per row; reproducible.
double validation_loss(const Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                       const Matrix& clean_bits, std::uint64_t seed);

std::vector<EpochLog> train_denoiser(Denoiser& model, nn::AdamW& optimizer, const NoiseSchedule& schedule,
                                     const Matrix& train_condition, const Matrix& train_bits,
                                     const Matrix& val_condition, const Matrix& val_bits, const TrainConfig& config,
                                     const std::function<void(const EpochLog&)>& on_epoch = {});

/// Smooth feasibility of analog bits (rows = token slots): token
/// probabilities factorize over bits with P(bit = 1) = sigmoid(2 beta b), and
/// p = mean over consecutive slots of P_prev^T table P_cur. Writes dp/db to
/// `grad` when given.
double soft_feasibility(const Matrix& bits, const reach::FeasibilityTable& table, double bit_beta,
                        Matrix* grad = nullptr);

struct Guidance {
    const reach::FeasibilityTable* table = nullptr;
    double scale = 0.0;
    double bit_beta = 4.0;
};

/// Reverse process for `samples` draws sharing one condition. Sample i uses
/// the stream derive_seed(seed, i); guidance proposals use a separate stream
/// so a zero scale reproduces the unguided output bitwise.
std::vector<std::vector<int>> sample(const Denoiser& model, const NoiseSchedule& schedule,
                                     std::span<const double> condition, int samples, std::uint64_t seed,
                                     const Guidance& guidance = {});

std::vector<int> sample_unguided(const Denoiser& model, const NoiseSchedule& schedule,
                                 std::span<const double> condition, std::uint64_t seed);
std::vector<int> sample_guided(const Denoiser& model, const NoiseSchedule& schedule,
                               std::span<const double> condition, const reach::FeasibilityTable& table, double scale,
                               std::uint64_t seed, double bit_beta = 4.0);

/// Clean-bit estimate (A_k - sqrt(1 - ab_k) eps) / sqrt(ab_k), clipped to
/// [-1, 1].
Matrix predicted_clean(const NoiseSchedule& schedule, int k, const Matrix& noisy, const Matrix& predicted_noise);

/// Posterior mean of A_{k-1} given A_k and the clipped clean estimate.
/// Without clipping this equals (A_k - (1 - a_k)/sqrt(1 - ab_k) eps)/sqrt(a_k);
/// the clipped form stays finite where ab_K is near zero.
Matrix posterior_mean(const NoiseSchedule& schedule, int k, const Matrix& noisy, const Matrix& predicted_noise);

}  // namespace rdiff::diffusion
