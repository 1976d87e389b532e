#include "rdiff/haq.hpp"

#include <algorithm>
#include <numeric>

namespace rdiff::haq {
namespace {

using nn::Checkpoint;
using nn::Parameter;
using nn::Tape;
using nn::Var;

Matrix rows_of(const Matrix& table, const std::vector<int>& idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(idx[i]);
    return out;
}

void count_usage(Codebook& cb, const std::vector<int>& idx) {
    for (int i : idx) ++cb.usage[static_cast<std::size_t>(i)];
}

}  // namespace

void HaqConfig::validate() const {
    if (window_steps < 1 || context_dim < 1 || codebook_size < 1 || code_dim < 1) {
        fail(ErrorKind::validation, "HAQ sizes must be positive");
    }
    for (int h : hidden_dims) {
        if (h < 1) fail(ErrorKind::validation, "HAQ hidden widths must be positive");
    }
    if (!(beta >= 0.0)) {
        fail(ErrorKind::validation, "commitment weight beta must be non-negative");
    }
}

Quantized quantize(std::span<const double> embedding, const Matrix& entries) {
    if (entries.rows() == 0) {
        fail(ErrorKind::validation, "cannot quantize against an empty codebook");
    }
    if (static_cast<Eigen::Index>(embedding.size()) != entries.cols()) {
        fail(ErrorKind::dimension, "embedding has " + std::to_string(embedding.size()) + " dims, codebook has " +
                                       std::to_string(entries.cols()));
    }
    Quantized best{0, std::numeric_limits<double>::infinity()};
    for (Eigen::Index j = 0; j < entries.rows(); ++j) {
        double d = 0.0;
        for (Eigen::Index k = 0; k < entries.cols(); ++k) {
            const double diff = embedding[static_cast<std::size_t>(k)] - entries(j, k);
            d += diff * diff;
        }
        if (d < best.squared_distance) {
            best = {static_cast<int>(j), d};
        }
    }
    if (!std::isfinite(best.squared_distance)) {
        fail(ErrorKind::numeric, "non-finite embedding in quantization");
    }
    return best;
}

std::vector<int> quantize_rows(const Matrix& embeddings, const Matrix& entries) {
    std::vector<int> out(static_cast<std::size_t>(embeddings.rows()));
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
        out[static_cast<std::size_t>(i)] =
            quantize(std::span<const double>(embeddings.row(i).data(), static_cast<std::size_t>(embeddings.cols())),
                     entries)
                .index;
    }
    return out;
}

double Codebook::used_fraction() const {
    if (usage.empty()) return 0.0;
    const auto used = std::count_if(usage.begin(), usage.end(), [](std::int64_t u) { return u > 0; });
    return static_cast<double>(used) / static_cast<double>(usage.size());
}

double Codebook::usage_entropy() const {
    const double total = static_cast<double>(std::accumulate(usage.begin(), usage.end(), std::int64_t{0}));
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (std::int64_t u : usage) {
        if (u > 0) {
            const double p = static_cast<double>(u) / total;
            h -= p * std::log2(p);
        }
    }
    return h;
}

Batch make_batch(std::span<const data::TokenWindow> windows, std::span<const std::size_t> rows,
                 const HaqConfig& config) {
    Batch b;
    const auto n = static_cast<Eigen::Index>(rows.size());
    b.positions.resize(n, config.position_dim());
    b.contexts.resize(n, config.context_input_dim());
    for (Eigen::Index r = 0; r < n; ++r) {
        const data::TokenWindow& w = windows[rows[static_cast<std::size_t>(r)]];
        if (static_cast<int>(w.positions.size()) != config.window_steps + 1 ||
            static_cast<int>(w.contexts.size()) != config.context_input_dim()) {
            fail(ErrorKind::dimension, "token window shape does not match the HAQ configuration");
        }
        for (int k = 0; k < config.window_steps; ++k) {
            b.positions(r, 2 * k) = w.positions[static_cast<std::size_t>(k + 1)].x;
            b.positions(r, 2 * k + 1) = w.positions[static_cast<std::size_t>(k + 1)].y;
        }
        std::copy(w.contexts.begin(), w.contexts.end(), b.contexts.row(r).data());
    }
    return b;
}

Batch make_batch(std::span<const data::TokenWindow> windows, const HaqConfig& config) {
    std::vector<std::size_t> rows(windows.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return make_batch(windows, rows, config);
}

Haq::Haq(HaqConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const int d = config_.code_dim;
    top_encoder_ = nn::Mlp({config_.context_input_dim(), d, config_.hidden_dims, config_.activation}, "top_encoder",
                           derive_seed(seed, 1));
    bottom_encoder_ = nn::Mlp({config_.position_dim() + d, d, config_.hidden_dims, config_.activation},
                              "bottom_encoder", derive_seed(seed, 2));
    decoder_ = nn::Mlp({d, config_.position_dim(), config_.hidden_dims, config_.activation}, "decoder",
                       derive_seed(seed, 3));
    Rng rng(derive_seed(seed, 4));
    std::normal_distribution<double> n(0.0, 1.0);
    auto make = [&](Level level, const char* name) {
        Codebook cb;
        cb.level = level;
        Matrix e(config_.codebook_size, d);
        for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = n(rng);
        cb.entries = Parameter(name, std::move(e));
        cb.usage.assign(static_cast<std::size_t>(config_.codebook_size), 0);
        return cb;
    };
    top_ = make(Level::top, "codebook.top");
    bottom_ = make(Level::bottom, "codebook.bottom");
}

Matrix Haq::top_embeddings(const Matrix& contexts) const { return top_encoder_.forward(contexts); }

Matrix Haq::bottom_embeddings(const Matrix& positions, const Matrix& top_codes) const {
    Matrix in(positions.rows(), positions.cols() + top_codes.cols());
    in << positions, top_codes;
    return bottom_encoder_.forward(in);
}

std::vector<int> Haq::encode_batch(const Batch& batch) const {
    const Matrix ht = top_embeddings(batch.contexts);
    const Matrix zt = rows_of(top_.entries.value, quantize_rows(ht, top_.entries.value));
    return quantize_rows(bottom_embeddings(batch.positions, zt), bottom_.entries.value);
}

ActionToken Haq::encode(const data::TokenWindow& window) const {
    return ActionToken{encode_batch(make_batch(std::span<const data::TokenWindow>(&window, 1), config_)).front()};
}

Matrix Haq::decode_codes(const Matrix& codes) const { return decoder_.forward(codes); }

Segment Haq::decode(ActionToken token) const {
    if (token.index < 0 || token.index >= config_.codebook_size) {
        fail(ErrorKind::validation, "token index " + std::to_string(token.index) + " outside [0, " +
                                        std::to_string(config_.codebook_size) + ")");
    }
    const Matrix out = decoder_.forward(bottom_.entries.value.row(token.index));
    Segment seg;
    seg.reserve(static_cast<std::size_t>(config_.window_steps) + 1);
    seg.push_back({0.0, 0.0});
    for (int k = 0; k < config_.window_steps; ++k) seg.push_back({out(0, 2 * k), out(0, 2 * k + 1)});
    return seg;
}

Var Haq::loss(Tape& tape, const Batch& batch, LossParts* parts, std::vector<int>* top_index,
              std::vector<int>* bottom_index, bool identity_quantization) {
    const Var x = tape.constant(batch.positions);
    const Var h_top = top_encoder_.forward(tape, tape.constant(batch.contexts));
    Var z_top = h_top;
    Var total{};
    bool have_total = false;
    auto accumulate = [&](Var term) {
        total = have_total ? tape.add(total, term) : term;
        have_total = true;
    };
    double cb_top = 0.0, cm_top = 0.0, cb_bot = 0.0, cm_bot = 0.0;

    // Codebook term pulls entries to frozen embeddings; commitment pulls
    // embeddings to frozen entries; the straight-through copy feeds forward.
    auto vq = [&](Var h, Codebook& cb, std::vector<int>* index_out, double& cb_value, double& cm_value) {
        const Matrix& hv = tape.value(h);
        std::vector<int> idx = quantize_rows(hv, cb.entries.value);
        const Matrix zv = rows_of(cb.entries.value, idx);
        const Var codebook_term = tape.mean_row_sq_norm(tape.sub(tape.gather_rows(tape.param(cb.entries), idx),
                                                                 tape.constant(hv)));
        const Var commit_term = tape.mean_row_sq_norm(tape.sub(h, tape.constant(zv)));
        cb_value = tape.value(codebook_term)(0, 0);
        cm_value = tape.value(commit_term)(0, 0);
        accumulate(codebook_term);
        accumulate(tape.scale(commit_term, config_.beta));
        if (index_out) *index_out = idx;
        return tape.straight_through(h, zv);
    };

    if (!identity_quantization) {
        z_top = vq(h_top, top_, top_index, cb_top, cm_top);
    }
    const Var h_bot = bottom_encoder_.forward(tape, tape.concat_cols(x, z_top));
    Var z_bot = h_bot;
    if (!identity_quantization) {
        z_bot = vq(h_bot, bottom_, bottom_index, cb_bot, cm_bot);
    }
    const Var recon = decoder_.forward(tape, z_bot);
    const Var recon_term = tape.mean_row_sq_norm(tape.sub(recon, x));
    const double recon_value = tape.value(recon_term)(0, 0);
    accumulate(recon_term);
    if (parts) {
        parts->reconstruction = recon_value;
        parts->codebook_top = cb_top;
        parts->commitment_top = cm_top;
        parts->codebook_bottom = cb_bot;
        parts->commitment_bottom = cm_bot;
        parts->total = tape.value(total)(0, 0);
    }
    return total;
}

LossParts Haq::evaluate(const Batch& batch, bool identity_quantization) {
    Tape tape;
    LossParts parts;
    loss(tape, batch, &parts, nullptr, nullptr, identity_quantization);
    return parts;
}

double Haq::reconstruction_error(std::span<const data::TokenWindow> windows) const {
    if (windows.empty()) {
        fail(ErrorKind::validation, "no windows to evaluate");
    }
    const Batch b = make_batch(windows, config_);
    const std::vector<int> tokens = encode_batch(b);
    const Matrix recon = decoder_.forward(rows_of(bottom_.entries.value, tokens));
    double sum = 0.0;
    for (Eigen::Index r = 0; r < recon.rows(); ++r) {
        for (int k = 0; k < config_.window_steps; ++k) {
            sum += std::hypot(recon(r, 2 * k) - b.positions(r, 2 * k), recon(r, 2 * k + 1) - b.positions(r, 2 * k + 1));
        }
    }
    return sum / static_cast<double>(recon.rows() * config_.window_steps);
}

std::vector<Parameter*> Haq::encoder_parameters() {
    std::vector<Parameter*> ps = top_encoder_.parameters();
    for (Parameter* p : bottom_encoder_.parameters()) ps.push_back(p);
    return ps;
}

std::vector<Parameter*> Haq::decoder_parameters() { return decoder_.parameters(); }

std::vector<Parameter*> Haq::parameters() {
    std::vector<Parameter*> ps = encoder_parameters();
    for (Parameter* p : decoder_.parameters()) ps.push_back(p);
    ps.push_back(&top_.entries);
    ps.push_back(&bottom_.entries);
    return ps;
}

void Haq::initialize_codebooks(std::span<const data::TokenWindow> windows, std::uint64_t seed) {
    if (windows.empty()) {
        fail(ErrorKind::validation, "cannot initialize codebooks from an empty dataset");
    }
    Rng rng(derive_seed(seed, 0x696e6974ull));
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t j = static_cast<std::size_t>(config_.codebook_size);
    std::vector<std::size_t> rows(j);
    for (std::size_t i = 0; i < j; ++i) rows[i] = order[i % order.size()];
    const Batch b = make_batch(windows, rows, config_);
    std::normal_distribution<double> jitter(0.0, 1e-3);
    auto seed_from = [&](Codebook& cb, const Matrix& h) {
        cb.entries.value = h;
        for (std::size_t i = order.size(); i < j; ++i) {
            for (Eigen::Index k = 0; k < h.cols(); ++k) cb.entries.value(static_cast<Eigen::Index>(i), k) += jitter(rng);
        }
    };
    seed_from(top_, top_embeddings(b.contexts));
    const Matrix zt = rows_of(top_.entries.value, quantize_rows(top_embeddings(b.contexts), top_.entries.value));
    seed_from(bottom_, bottom_embeddings(b.positions, zt));
    initialized_ = true;
}

Checkpoint Haq::to_checkpoint() const {
    Checkpoint ck;
    ck.add_scalar("haq.window_steps", config_.window_steps);
    ck.add_scalar("haq.context_dim", config_.context_dim);
    ck.add_scalar("haq.codebook_size", config_.codebook_size);
    ck.add_scalar("haq.code_dim", config_.code_dim);
    ck.add_scalar("haq.beta", config_.beta);
    ck.add_scalar("haq.activation", static_cast<double>(config_.activation));
    Matrix hidden(1, static_cast<Eigen::Index>(config_.hidden_dims.size()));
    for (std::size_t i = 0; i < config_.hidden_dims.size(); ++i) hidden(0, static_cast<Eigen::Index>(i)) = config_.hidden_dims[i];
    ck.add("haq.hidden_dims", hidden);
    ck.add_scalar("haq.initialized", initialized_ ? 1.0 : 0.0);
    ck.add_scalar("haq.trained_epochs", trained_epochs_);
    for (const nn::Mlp* m : {&top_encoder_, &bottom_encoder_, &decoder_}) {
        for (const Parameter* p : m->parameters()) ck.add(*p);
    }
    ck.add(top_.entries);
    ck.add(bottom_.entries);
    return ck;
}

Haq Haq::from_checkpoint(const Checkpoint& ck) {
    HaqConfig c;
    c.window_steps = static_cast<int>(ck.scalar("haq.window_steps"));
    c.context_dim = static_cast<int>(ck.scalar("haq.context_dim"));
    c.codebook_size = static_cast<int>(ck.scalar("haq.codebook_size"));
    c.code_dim = static_cast<int>(ck.scalar("haq.code_dim"));
    c.beta = ck.scalar("haq.beta");
    const int act = static_cast<int>(ck.scalar("haq.activation"));
    if (act < 0 || act > 2) fail(ErrorKind::io, "corrupt activation id in HAQ checkpoint");
    c.activation = static_cast<nn::Activation>(act);
    const Matrix hidden = ck.matrix("haq.hidden_dims");
    c.hidden_dims.clear();
    for (Eigen::Index i = 0; i < hidden.size(); ++i) c.hidden_dims.push_back(static_cast<int>(hidden.data()[i]));
    Haq h(c, 0);
    for (Parameter* p : h.parameters()) ck.load_into(*p);
    h.initialized_ = ck.scalar("haq.initialized") != 0.0;
    h.trained_epochs_ = static_cast<int>(ck.scalar("haq.trained_epochs"));
    return h;
}

void Haq::save(const std::filesystem::path& path) const { to_checkpoint().save(path); }

Haq Haq::load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

TrainResult train_haq(Haq& model, nn::AdamW& optimizer, std::span<const data::TokenWindow> train,
                      std::span<const data::TokenWindow> val, const TrainConfig& config,
                      const std::function<void(const EpochLog&)>& on_epoch) {
    if (train.empty()) {
        fail(ErrorKind::validation, "HAQ training set is empty");
    }
    if (config.batch_size < 1 || config.epochs < 0 || config.patience < 1) {
        fail(ErrorKind::validation, "invalid HAQ training settings");
    }
    const HaqConfig& hc = model.config();
    if (!model.codebooks_initialized()) {
        model.initialize_codebooks(train, config.seed);
    }
    std::span<const data::TokenWindow> val_set = val.empty() ? train : val;
    const Batch val_batch = make_batch(val_set, hc);

    std::vector<Parameter*> params = model.parameters();
    TrainResult result;
    double best_error = model.reconstruction_error(val_set);
    std::vector<Matrix> best_values;
    for (const Parameter* p : params) best_values.push_back(p->value);
    int best_epoch = model.trained_epochs();
    int since_best = 0;

    std::vector<std::size_t> order(train.size());
    const int first = model.trained_epochs() + 1;
    for (int epoch = first; epoch < first + config.epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, 0x68617165ull, static_cast<std::uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        Codebook& top = model.codebook(Level::top);
        Codebook& bot = model.codebook(Level::bottom);
        std::fill(top.usage.begin(), top.usage.end(), 0);
        std::fill(bot.usage.begin(), bot.usage.end(), 0);

        double loss_sum = 0.0, recon_sum = 0.0;
        std::size_t batches = 0;
        Matrix last_top, last_bottom_positions, last_bottom_codes;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
            const Batch b = make_batch(train, std::span<const std::size_t>(order.data() + s, e - s), hc);
            nn::zero_grads(params);
            Tape tape;
            LossParts parts;
            std::vector<int> ti, bi;
            const Var l = model.loss(tape, b, &parts, &ti, &bi);
            tape.backward(l);
            optimizer.step();
            count_usage(top, ti);
            count_usage(bot, bi);
            loss_sum += parts.total;
            recon_sum += parts.reconstruction;
            ++batches;
            last_top = b.contexts;
            last_bottom_positions = b.positions;
        }

        // Dead entries restart at embeddings of the last batch.
        EpochLog log;
        log.epoch = epoch;
        log.top_used = top.used_fraction();
        log.bottom_used = bot.used_fraction();
        const Matrix ht = model.top_embeddings(last_top);
        const Matrix zt = [&] {
            const std::vector<int> idx = quantize_rows(ht, top.entries.value);
            Matrix z(ht.rows(), ht.cols());
            for (std::size_t i = 0; i < idx.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = top.entries.value.row(idx[i]);
            return z;
        }();
        const Matrix hb = model.bottom_embeddings(last_bottom_positions, zt);
        Rng pick(derive_seed(config.seed, 0x64656164ull, static_cast<std::uint64_t>(epoch)));
        std::normal_distribution<double> jitter(0.0, 1e-3);
        const auto& opt_params = optimizer.params();
        auto revive = [&](Codebook& cb, const Matrix& h) {
            std::uniform_int_distribution<Eigen::Index> row(0, h.rows() - 1);
            std::size_t slot = 0;
            while (slot < opt_params.size() && opt_params[slot] != &cb.entries) ++slot;
            for (std::size_t j = 0; j < cb.usage.size(); ++j) {
                if (cb.usage[j] > 0) continue;
                const Eigen::Index r = row(pick);
                for (Eigen::Index k = 0; k < h.cols(); ++k) {
                    cb.entries.value(static_cast<Eigen::Index>(j), k) = h(r, k) + jitter(pick);
                }
                if (slot < opt_params.size()) {
                    optimizer.first_moments()[slot].row(static_cast<Eigen::Index>(j)).setZero();
                    optimizer.second_moments()[slot].row(static_cast<Eigen::Index>(j)).setZero();
                }
                ++log.reinitialized;
            }
        };
        revive(top, ht);
        revive(bot, hb);

        log.train_loss = loss_sum / static_cast<double>(batches);
        log.train_reconstruction = recon_sum / static_cast<double>(batches);
        log.val_loss = model.evaluate(val_batch).total;
        log.val_error = model.reconstruction_error(val_set);
        model.set_trained_epochs(epoch);
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);

        if (log.val_error < best_error) {
            best_error = log.val_error;
            best_epoch = epoch;
            since_best = 0;
            for (std::size_t i = 0; i < params.size(); ++i) best_values[i] = params[i]->value;
        } else if (++since_best >= config.patience) {
            result.stopped_early = true;
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    result.best_epoch = best_epoch;
    return result;
}

}  // namespace rdiff::haq
