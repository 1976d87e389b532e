#include "rdiff/diffusion.hpp"

#include <algorithm>

namespace rdiff::diffusion {
namespace {

using nn::Checkpoint;
using nn::Tape;
using nn::Var;

Matrix repeat_row(std::span<const double> row, int times) {
    Matrix m(times, static_cast<Eigen::Index>(row.size()));
    for (int i = 0; i < times; ++i) std::copy(row.begin(), row.end(), m.row(i).data());
    return m;
}

void fill_normal(Matrix& m, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
}

void check_steps(const NoiseSchedule& s, std::span<const int> steps) {
    for (int k : steps) {
        if (k < 1 || k > s.steps) fail(ErrorKind::validation, "diffusion step " + std::to_string(k) + " out of range");
    }
}

}  // namespace

Matrix noisy_bits(const NoiseSchedule& s, const Matrix& clean, std::span<const int> steps, const Matrix& noise) {
    if (clean.rows() != noise.rows() || clean.cols() != noise.cols() ||
        static_cast<std::size_t>(clean.rows()) != steps.size()) {
        fail(ErrorKind::dimension, "noisy_bits: clean, noise and steps disagree in shape");
    }
    for (int k : steps) {
        if (k < 0 || k > s.steps) fail(ErrorKind::validation, "diffusion step " + std::to_string(k) + " out of range");
    }
    Matrix a(clean.rows(), clean.cols());
    for (Eigen::Index r = 0; r < clean.rows(); ++r) {
        const double ab = s.alpha_bar[static_cast<std::size_t>(steps[static_cast<std::size_t>(r)])];
        a.row(r) = std::sqrt(ab) * clean.row(r) + std::sqrt(1.0 - ab) * noise.row(r);
    }
    return a;
}

NoiseSchedule cosine_schedule(int steps, double offset) {
    if (steps < 1) {
        fail(ErrorKind::validation, "diffusion needs at least one step");
    }
    if (!(offset >= 0.0)) {
        fail(ErrorKind::validation, "schedule offset must be non-negative");
    }
    auto f = [&](int k) {
        const double c = std::cos(((static_cast<double>(k) / steps + offset) / (1.0 + offset)) * kPi / 2.0);
        return c * c;
    };
    NoiseSchedule s;
    s.steps = steps;
    const double f0 = f(0);
    for (int k = 0; k <= steps; ++k) s.alpha_bar.push_back(f(k) / f0);
    s.alpha.push_back(1.0);
    s.sigma.push_back(0.0);
    for (int k = 1; k <= steps; ++k) {
        const double a = s.alpha_bar[k] / s.alpha_bar[k - 1];
        s.alpha.push_back(a);
        s.sigma.push_back(std::sqrt((1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k]) * (1.0 - a)));
    }
    return s;
}

Matrix int2bit(std::span<const int> tokens, int bits) {
    if (bits < 1 || bits > 30) {
        fail(ErrorKind::validation, "bit width must be in [1, 30]");
    }
    Matrix out(static_cast<Eigen::Index>(tokens.size()), bits);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const int v = tokens[t];
        if (v < 0 || v >= (1 << bits)) {
            fail(ErrorKind::validation, "token " + std::to_string(v) + " does not fit in " + std::to_string(bits) + " bits");
        }
        for (int i = 0; i < bits; ++i) {
            out(static_cast<Eigen::Index>(t), i) = ((v >> (bits - 1 - i)) & 1) ? 1.0 : -1.0;
        }
    }
    return out;
}

std::vector<int> bit2int(const Matrix& bits) {
    std::vector<int> out(static_cast<std::size_t>(bits.rows()));
    for (Eigen::Index r = 0; r < bits.rows(); ++r) {
        int v = 0;
        for (Eigen::Index i = 0; i < bits.cols(); ++i) v = (v << 1) | (bits(r, i) >= 0.0 ? 1 : 0);
        out[static_cast<std::size_t>(r)] = v;
    }
    return out;
}

Matrix time_embedding(std::span<const int> steps, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        fail(ErrorKind::validation, "time embedding dimension must be even and positive");
    }
    const int half = dim / 2;
    Matrix out(static_cast<Eigen::Index>(steps.size()), dim);
    for (std::size_t r = 0; r < steps.size(); ++r) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
            out(static_cast<Eigen::Index>(r), i) = std::sin(steps[r] * freq);
            out(static_cast<Eigen::Index>(r), half + i) = std::cos(steps[r] * freq);
        }
    }
    return out;
}

void DenoiserConfig::validate() const {
    if (condition_dim < 1 || tokens < 1 || bits < 1 || time_dim < 2 || time_dim % 2 != 0) {
        fail(ErrorKind::validation, "invalid denoiser dimensions");
    }
    for (int h : hidden_dims) {
        if (h < 1) fail(ErrorKind::validation, "denoiser hidden widths must be positive");
    }
}

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    net_ = nn::Mlp({config_.condition_dim + config_.bits_dim() + config_.time_dim, config_.bits_dim(),
                    config_.hidden_dims, config_.activation},
                   "denoiser", seed);
}

Matrix Denoiser::input(const Matrix& condition, const Matrix& noisy, std::span<const int> steps) const {
    if (condition.cols() != config_.condition_dim || noisy.cols() != config_.bits_dim() ||
        condition.rows() != noisy.rows() || static_cast<Eigen::Index>(steps.size()) != noisy.rows()) {
        fail(ErrorKind::dimension, "denoiser input shapes: condition " + std::to_string(condition.rows()) + "x" +
                                       std::to_string(condition.cols()) + ", bits " + std::to_string(noisy.rows()) +
                                       "x" + std::to_string(noisy.cols()) + ", steps " + std::to_string(steps.size()));
    }
    Matrix in(condition.rows(), condition.cols() + noisy.cols() + config_.time_dim);
    in << condition, noisy, time_embedding(steps, config_.time_dim);
    return in;
}

Matrix Denoiser::predict(const Matrix& condition, const Matrix& noisy_bits, std::span<const int> steps) const {
    return net_.forward(input(condition, noisy_bits, steps));
}

Var Denoiser::forward(Tape& tape, const Matrix& condition, const Matrix& noisy_bits, std::span<const int> steps) {
    return net_.forward(tape, tape.constant(input(condition, noisy_bits, steps)));
}

Checkpoint Denoiser::to_checkpoint() const {
    Checkpoint ck;
    ck.add_scalar("denoiser.condition_dim", config_.condition_dim);
    ck.add_scalar("denoiser.tokens", config_.tokens);
    ck.add_scalar("denoiser.bits", config_.bits);
    ck.add_scalar("denoiser.time_dim", config_.time_dim);
    ck.add_scalar("denoiser.activation", static_cast<double>(config_.activation));
    Matrix hidden(1, static_cast<Eigen::Index>(config_.hidden_dims.size()));
    for (std::size_t i = 0; i < config_.hidden_dims.size(); ++i) hidden(0, static_cast<Eigen::Index>(i)) = config_.hidden_dims[i];
    ck.add("denoiser.hidden_dims", hidden);
    ck.add_scalar("denoiser.trained_epochs", trained_epochs_);
    for (const nn::Parameter* p : net_.parameters()) ck.add(*p);
    return ck;
}

Denoiser Denoiser::from_checkpoint(const Checkpoint& ck) {
    DenoiserConfig c;
    c.condition_dim = static_cast<int>(ck.scalar("denoiser.condition_dim"));
    c.tokens = static_cast<int>(ck.scalar("denoiser.tokens"));
    c.bits = static_cast<int>(ck.scalar("denoiser.bits"));
    c.time_dim = static_cast<int>(ck.scalar("denoiser.time_dim"));
    const int act = static_cast<int>(ck.scalar("denoiser.activation"));
    if (act < 0 || act > 2) fail(ErrorKind::io, "corrupt activation id in denoiser checkpoint");
    c.activation = static_cast<nn::Activation>(act);
    const Matrix hidden = ck.matrix("denoiser.hidden_dims");
    c.hidden_dims.clear();
    for (Eigen::Index i = 0; i < hidden.size(); ++i) c.hidden_dims.push_back(static_cast<int>(hidden.data()[i]));
    Denoiser d(c, 0);
    for (nn::Parameter* p : d.parameters()) ck.load_into(*p);
    d.trained_epochs_ = static_cast<int>(ck.scalar("denoiser.trained_epochs"));
    return d;
}

void Denoiser::save(const std::filesystem::path& path) const { to_checkpoint().save(path); }

Denoiser Denoiser::load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

Var denoising_loss(Tape& tape, Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                   const Matrix& clean_bits, std::span<const int> steps, const Matrix& noise) {
    check_steps(schedule, steps);
    const Matrix a = noisy_bits(schedule, clean_bits, steps, noise);
    const Var pred = model.forward(tape, condition, a, steps);
    return tape.mean_row_sq_norm(tape.sub(pred, tape.constant(noise)));
}

Var denoising_loss(Tape& tape, Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                   const Matrix& clean_bits, Rng& rng) {
    std::uniform_int_distribution<int> k(1, schedule.steps);
    std::vector<int> steps(static_cast<std::size_t>(clean_bits.rows()));
    for (int& s : steps) s = k(rng);
    Matrix noise(clean_bits.rows(), clean_bits.cols());
    fill_normal(noise, rng);
    return denoising_loss(tape, model, schedule, condition, clean_bits, steps, noise);
}

double train_step(Denoiser& model, nn::AdamW& optimizer, const NoiseSchedule& schedule, const Matrix& condition,
                  const Matrix& clean_bits, Rng& rng) {
    auto params = model.parameters();
    nn::zero_grads(params);
    Tape tape;
    const Var l = denoising_loss(tape, model, schedule, condition, clean_bits, rng);
    tape.backward(l);
    optimizer.step();
    return tape.value(l)(0, 0);
}

double validation_loss(const Denoiser& model, const NoiseSchedule& schedule, const Matrix& condition,
                       const Matrix& clean_bits, std::uint64_t seed) {
    if (clean_bits.rows() == 0) return 0.0;
    Rng rng(derive_seed(seed, 0x76616cull));
    std::uniform_int_distribution<int> k(1, schedule.steps);
    std::vector<int> steps(static_cast<std::size_t>(clean_bits.rows()));
    for (int& s : steps) s = k(rng);
    Matrix noise(clean_bits.rows(), clean_bits.cols());
    fill_normal(noise, rng);
    const Matrix pred = model.predict(condition, noisy_bits(schedule, clean_bits, steps, noise), steps);
    return (pred - noise).squaredNorm() / static_cast<double>(clean_bits.rows());
}

std::vector<EpochLog> train_denoiser(Denoiser& model, nn::AdamW& optimizer, const NoiseSchedule& schedule,
                                     const Matrix& train_condition, const Matrix& train_bits,
                                     const Matrix& val_condition, const Matrix& val_bits, const TrainConfig& config,
                                     const std::function<void(const EpochLog&)>& on_epoch) {
    if (train_bits.rows() == 0) {
        fail(ErrorKind::validation, "diffusion training set is empty");
    }
    if (config.batch_size < 1 || config.epochs < 0) {
        fail(ErrorKind::validation, "invalid diffusion training settings");
    }
    std::vector<EpochLog> log;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_bits.rows()));
    const int first = model.trained_epochs() + 1;
    for (int epoch = first; epoch < first + config.epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, 0x64696666ull, static_cast<std::uint64_t>(epoch)));
        // Each epoch permutes the identity so a resumed run sees the same batches.
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
            const auto n = static_cast<Eigen::Index>(e - s);
            Matrix c(n, train_condition.cols()), b(n, train_bits.cols());
            for (Eigen::Index r = 0; r < n; ++r) {
                c.row(r) = train_condition.row(order[s + static_cast<std::size_t>(r)]);
                b.row(r) = train_bits.row(order[s + static_cast<std::size_t>(r)]);
            }
            sum += train_step(model, optimizer, schedule, c, b, rng);
            ++batches;
        }
        EpochLog l;
        l.epoch = epoch;
        l.train_loss = sum / static_cast<double>(batches);
        l.val_loss = validation_loss(model, schedule, val_condition, val_bits, config.seed);
        model.set_trained_epochs(epoch);
        log.push_back(l);
        if (on_epoch) on_epoch(l);
    }
    return log;
}

double soft_feasibility(const Matrix& bits, const reach::FeasibilityTable& table, double bit_beta, Matrix* grad) {
    const auto slots = bits.rows();
    const auto nb = static_cast<int>(bits.cols());
    if (slots < 2) {
        fail(ErrorKind::validation, "feasibility needs at least two token slots");
    }
    const int j_count = 1 << nb;
    if (j_count != table.size()) {
        fail(ErrorKind::dimension, "feasibility table size " + std::to_string(table.size()) + " does not match " +
                                       std::to_string(nb) + "-bit tokens");
    }
    // q(t, i) = P(bit i of slot t is one); P(t, j) = product over bits.
    Matrix q(slots, nb), qn(slots, nb);
    for (Eigen::Index t = 0; t < slots; ++t) {
        for (int i = 0; i < nb; ++i) {
            q(t, i) = sigmoid(2.0 * bit_beta * bits(t, i));
            qn(t, i) = sigmoid(-2.0 * bit_beta * bits(t, i));
        }
    }
    Matrix p(slots, j_count);
    for (Eigen::Index t = 0; t < slots; ++t) {
        for (int j = 0; j < j_count; ++j) {
            double v = 1.0;
            for (int i = 0; i < nb; ++i) v *= ((j >> (nb - 1 - i)) & 1) ? q(t, i) : qn(t, i);
            p(t, j) = v;
        }
    }
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> tab(
        table.entries().data(), j_count, j_count);
    const double norm = 1.0 / static_cast<double>(slots - 1);
    double value = 0.0;
    Matrix dp = Matrix::Zero(slots, j_count);
    for (Eigen::Index t = 1; t < slots; ++t) {
        const Eigen::RowVectorXd tp = (tab * p.row(t).transpose()).transpose();  // table P_cur
        value += norm * p.row(t - 1).dot(tp);
        if (grad) {
            dp.row(t - 1) += norm * tp;
            dp.row(t) += norm * (p.row(t - 1) * tab);
        }
    }
    if (grad) {
        grad->resize(slots, nb);
        for (Eigen::Index t = 0; t < slots; ++t) {
            for (int i = 0; i < nb; ++i) {
                double g = 0.0;
                for (int j = 0; j < j_count; ++j) {
                    const double bit = ((j >> (nb - 1 - i)) & 1) ? 1.0 : 0.0;
                    g += dp(t, j) * p(t, j) * (bit - q(t, i));
                }
                (*grad)(t, i) = 2.0 * bit_beta * g;
            }
        }
    }
    return value;
}

Matrix predicted_clean(const NoiseSchedule& s, int k, const Matrix& noisy, const Matrix& eps) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(k)];
    return ((noisy - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).cwiseMax(-1.0).cwiseMin(1.0);
}

Matrix posterior_mean(const NoiseSchedule& s, int k, const Matrix& noisy, const Matrix& eps) {
    const auto i = static_cast<std::size_t>(k);
    const double a = s.alpha[i];
    const double ab = s.alpha_bar[i];
    const double ab_prev = s.alpha_bar[i - 1];
    const double c0 = std::sqrt(ab_prev) * (1.0 - a) / (1.0 - ab);
    const double ck = std::sqrt(a) * (1.0 - ab_prev) / (1.0 - ab);
    return c0 * predicted_clean(s, k, noisy, eps) + ck * noisy;
}

std::vector<std::vector<int>> sample(const Denoiser& model, const NoiseSchedule& schedule,
                                     std::span<const double> condition, int samples, std::uint64_t seed,
                                     const Guidance& guidance) {
    const DenoiserConfig& c = model.config();
    if (samples < 1) {
        fail(ErrorKind::validation, "need at least one sample");
    }
    if (static_cast<int>(condition.size()) != c.condition_dim) {
        fail(ErrorKind::dimension, "condition has " + std::to_string(condition.size()) + " values, denoiser expects " +
                                       std::to_string(c.condition_dim));
    }
    if (!(guidance.scale >= 0.0) || !std::isfinite(guidance.scale)) {
        fail(ErrorKind::validation, "guidance scale must be finite and non-negative");
    }
    const bool guided = guidance.scale > 0.0;
    if (guided && guidance.table == nullptr) {
        fail(ErrorKind::validation, "guided sampling needs a feasibility table");
    }
    const Matrix cond = repeat_row(condition, samples);
    std::vector<Rng> streams;
    std::vector<Rng> proposal_streams;
    for (int i = 0; i < samples; ++i) {
        streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
        proposal_streams.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i), 0x67756964ull));
    }
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix a(samples, c.bits_dim());
    for (int i = 0; i < samples; ++i) {
        for (int d = 0; d < c.bits_dim(); ++d) a(i, d) = n01(streams[static_cast<std::size_t>(i)]);
    }
    std::vector<int> steps(static_cast<std::size_t>(samples));
    for (int k = schedule.steps; k >= 1; --k) {
        std::fill(steps.begin(), steps.end(), k);
        const Matrix eps = model.predict(cond, a, steps);
        Matrix mean = posterior_mean(schedule, k, a, eps);
        const double sigma = schedule.sigma[static_cast<std::size_t>(k)];
        if (guided) {
            for (int i = 0; i < samples; ++i) {
                Matrix proposal(c.tokens, c.bits);
                for (int d = 0; d < c.bits_dim(); ++d) {
                    proposal.data()[d] = mean(i, d) + sigma * n01(proposal_streams[static_cast<std::size_t>(i)]);
                }
                Matrix g;
                const double p = soft_feasibility(proposal, *guidance.table, guidance.bit_beta, &g);
                if (!(p > 0.0) || !g.allFinite()) {
                    fail(ErrorKind::numeric, "guidance gradient is not finite at step " + std::to_string(k));
                }
                for (int d = 0; d < c.bits_dim(); ++d) {
                    mean(i, d) += guidance.scale * sigma * sigma * g.data()[d] / p;
                }
            }
        }
        if (k > 1) {
            for (int i = 0; i < samples; ++i) {
                for (int d = 0; d < c.bits_dim(); ++d) {
                    a(i, d) = mean(i, d) + sigma * n01(streams[static_cast<std::size_t>(i)]);
                }
            }
        } else {
            a = mean;
        }
        if (!a.allFinite()) {
            fail(ErrorKind::numeric, "reverse diffusion diverged at step " + std::to_string(k));
        }
    }
    std::vector<std::vector<int>> out;
    for (int i = 0; i < samples; ++i) {
        Matrix row(c.tokens, c.bits);
        for (int d = 0; d < c.bits_dim(); ++d) row.data()[d] = a(i, d);
        out.push_back(bit2int(row));
    }
    return out;
}

std::vector<int> sample_unguided(const Denoiser& model, const NoiseSchedule& schedule,
                                 std::span<const double> condition, std::uint64_t seed) {
    return sample(model, schedule, condition, 1, seed).front();
}

std::vector<int> sample_guided(const Denoiser& model, const NoiseSchedule& schedule,
                               std::span<const double> condition, const reach::FeasibilityTable& table, double scale,
                               std::uint64_t seed, double bit_beta) {
    return sample(model, schedule, condition, 1, seed, Guidance{&table, scale, bit_beta}).front();
}

}  // namespace rdiff::diffusion
