#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "rdiff/data.hpp"
#include "rdiff/nn.hpp"
#include "rdiff/tokens.hpp"

// Two-level VQ-VAE over token windows. The top level quantizes the window's
// contexts; the bottom level quantizes the positions together with the top
// code and is the token vocabulary.
namespace rdiff::haq {

using nn::Matrix;

struct HaqConfig {
    int window_steps = 5;
    int context_dim = dynamics::kDefaultContextDim;
    int codebook_size = 256;
    int code_dim = 128;
    std::vector<int> hidden_dims{256, 256};
    nn::Activation activation = nn::Activation::relu;
    double beta = 1.0;

    void validate() const;
    int position_dim() const { return 2 * window_steps; }
    int context_input_dim() const { return window_steps * context_dim; }
};

enum class Level { top, bottom };

struct Quantized {
    int index = 0;
    double squared_distance = 0.0;
};

/// Nearest codebook row; ties go to the lowest index.
Quantized quantize(std::span<const double> embedding, const Matrix& entries);

/// quantize() applied to every row.
std::vector<int> quantize_rows(const Matrix& embeddings, const Matrix& entries);

struct Codebook {
    Level level = Level::bottom;
    nn::Parameter entries;
    std::vector<std::int64_t> usage;

    int size() const { return static_cast<int>(entries.value.rows()); }
    double used_fraction() const;
    /// Shannon entropy (bits) of the usage histogram.
    double usage_entropy() const;
};

struct Batch {
    Matrix positions;  // rows: flattened non-origin points
    Matrix contexts;   // rows: flattened contexts
};

Batch make_batch(std::span<const data::TokenWindow> windows, std::span<const std::size_t> rows, const HaqConfig& config);
Batch make_batch(std::span<const data::TokenWindow> windows, const HaqConfig& config);

struct LossParts {
    double total = 0.0;
    double reconstruction = 0.0;
    double codebook_top = 0.0;
    double commitment_top = 0.0;
    double codebook_bottom = 0.0;
    double commitment_bottom = 0.0;
};

class Haq final : public TokenDecoder {
public:
    Haq() = default;
    Haq(HaqConfig config, std::uint64_t seed);

    const HaqConfig& config() const { return config_; }
    int codebook_size() const override { return config_.codebook_size; }
    int window_steps() const override { return config_.window_steps; }

    ActionToken encode(const data::TokenWindow& window) const;
    std::vector<int> encode_batch(const Batch& batch) const;
    Segment decode(ActionToken token) const override;
    /// Decoded points (without the origin) for a batch of bottom codes.
    Matrix decode_codes(const Matrix& codes) const;

    /// Records the training objective on `tape`. With identity quantization
    /// both codebooks are bypassed (a plain autoencoder).
    nn::Var loss(nn::Tape& tape, const Batch& batch, LossParts* parts = nullptr,
                 std::vector<int>* top_index = nullptr, std::vector<int>* bottom_index = nullptr,
                 bool identity_quantization = false);
    LossParts evaluate(const Batch& batch, bool identity_quantization = false);

    /// Mean Euclidean error per non-anchor point after encode/decode.
    double reconstruction_error(std::span<const data::TokenWindow> windows) const;

    /// Top-level and bottom-level embeddings before quantization.
    Matrix top_embeddings(const Matrix& contexts) const;
    Matrix bottom_embeddings(const Matrix& positions, const Matrix& top_codes) const;

    Codebook& codebook(Level level) { return level == Level::top ? top_ : bottom_; }
    const Codebook& codebook(Level level) const { return level == Level::top ? top_ : bottom_; }

    std::vector<nn::Parameter*> parameters();
    std::vector<nn::Parameter*> encoder_parameters();
    std::vector<nn::Parameter*> decoder_parameters();

    bool codebooks_initialized() const { return initialized_; }
    /// Seeds both codebooks with embeddings of the given windows.
    void initialize_codebooks(std::span<const data::TokenWindow> windows, std::uint64_t seed);

    int trained_epochs() const { return trained_epochs_; }
    void set_trained_epochs(int e) { trained_epochs_ = e; }

    nn::Checkpoint to_checkpoint() const;
    static Haq from_checkpoint(const nn::Checkpoint& ckpt);
    void save(const std::filesystem::path& path) const;
    static Haq load(const std::filesystem::path& path);

private:
    HaqConfig config_;
    nn::Mlp top_encoder_;
    nn::Mlp bottom_encoder_;
    nn::Mlp decoder_;
    Codebook top_;
    Codebook bottom_;
    bool initialized_ = false;
    int trained_epochs_ = 0;
};

struct TrainConfig {
    int epochs = 60;
    int batch_size = 128;
    int patience = 10;
    nn::AdamWConfig optimizer{1e-3};
    std::uint64_t seed = 0;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_reconstruction = 0.0;
    double val_loss = 0.0;
    double val_error = 0.0;  // meters per point
    double top_used = 0.0;
    double bottom_used = 0.0;
    int reinitialized = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
    bool stopped_early = false;
};

/// AdamW training with dead-code reinitialization and early stopping on the
/// validation reconstruction error; the best epoch's weights are kept.
/// `optimizer` must be built over model.parameters(); epochs continue after
/// model.trained_epochs().
TrainResult train_haq(Haq& model, nn::AdamW& optimizer, std::span<const data::TokenWindow> train,
                      std::span<const data::TokenWindow> val, const TrainConfig& config,
                      const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace rdiff::haq
